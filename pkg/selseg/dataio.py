"""
Samples and their on-disk format.

A dataset split is one directory:

    <root>/<split>/images/00000.ppm   binary PPM (P6), 8-bit RGB
    <root>/<split>/masks/00000.pgm    binary PGM (P5), labels 0..K-1 and 255
    <root>/<split>/boxes.csv          index,x0,y0,x1,y1,class
    <root>/<split>/meta.yaml          n_samples, n_classes, mean_pixel, seed

Splits are written to a temporary directory and moved into place, so a split
directory is either complete or absent.
"""

import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import yaml

from .errors import RejectedInputError

IGNORE_LABEL = 255
BOX_COLUMNS = ['index', 'x0', 'y0', 'x1', 'y1', 'class']


@dataclass
class Sample:
    """
    Image (3, H, W) with values in [0, 255], boxes (G, 4) as x0, y0, x1, y1
    with their classes (G,), and a label mask (H, W).
    """
    image: np.ndarray
    mask: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def shape(self):
        return self.image.shape[1:]


def box_mask_consistent(sample):
    """True if every box encloses at least one mask pixel of its class."""
    for (x0, y0, x1, y1), cls in zip(sample.boxes, sample.classes):
        ys, xs = np.nonzero(sample.mask == cls)
        # pixel (y, x) covers [x, x+1) x [y, y+1)
        inside = (xs + 1 > x0) & (xs < x1) & (ys + 1 > y0) & (ys < y1)
        if not inside.any():
            return False
    return True


def tight_box(region):
    """Half-open tight bounding box (x0, y0, x1, y1) of a boolean region."""
    ys, xs = np.nonzero(region)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def mean_pixel(samples):
    """Per-channel mean pixel value over a list of samples."""
    total = sum(s.image.reshape(s.image.shape[0], -1).sum(axis=1) for s in samples)
    count = sum(s.image.shape[1] * s.image.shape[2] for s in samples)
    return np.asarray(total, dtype=np.float64) / count


### Netpbm ###

def _read_header(data, n_fields):
    fields, pos = [], 2
    while len(fields) < n_fields:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b'#':
            pos = data.index(b'\n', pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    # exactly one whitespace byte separates header and raster
    return fields, pos + 1


def encode_ppm(image):
    """(3, H, W) array -> P6 bytes; values are rounded and clipped to 0..255."""
    img = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[0] != 3:
        raise RejectedInputError(f'PPM images must be (3, H, W), got {img.shape}')
    _, h, w = img.shape
    return f'P6\n{w} {h}\n255\n'.encode('ascii') + img.transpose(1, 2, 0).tobytes()


def decode_ppm(data):
    if data[:2] != b'P6':
        raise RejectedInputError('Not a binary PPM (P6) file')
    (w, h, maxval), start = _read_header(data, 3)
    if maxval != 255:
        raise RejectedInputError(f'Unsupported PPM maxval {maxval}')
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=start)
    return raster.reshape(h, w, 3).transpose(2, 0, 1).copy()


def encode_pgm(plane):
    """(H, W) array of 0..255 -> P5 bytes."""
    arr = np.asarray(plane)
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise RejectedInputError('PGM planes must be 2-D with values in 0..255')
    h, w = arr.shape
    return f'P5\n{w} {h}\n255\n'.encode('ascii') + arr.astype(np.uint8).tobytes()


def decode_pgm(data):
    if data[:2] != b'P5':
        raise RejectedInputError('Not a binary PGM (P5) file')
    (w, h, maxval), start = _read_header(data, 3)
    if maxval != 255:
        raise RejectedInputError(f'Unsupported PGM maxval {maxval}')
    return np.frombuffer(data, dtype=np.uint8, count=h * w, offset=start).reshape(h, w).copy()


def atomic_write(fname, data):
    """Write bytes or text to fname via a temporary file and rename."""
    tmp = fname + '.tmp'
    with open(tmp, 'wb' if isinstance(data, bytes) else 'w') as f:
        f.write(data)
    os.replace(tmp, fname)


def write_ppm(fname, image):
    atomic_write(fname, encode_ppm(image))


def read_ppm(fname):
    with open(fname, 'rb') as f:
        return decode_ppm(f.read())


def write_pgm(fname, plane):
    atomic_write(fname, encode_pgm(plane))


def read_pgm(fname):
    with open(fname, 'rb') as f:
        return decode_pgm(f.read())


### Dataset splits ###

def boxes_frame(samples):
    rows = [[i, *box, int(cls)] for i, s in enumerate(samples) for box, cls in zip(s.boxes, s.classes)]
    df = pd.DataFrame(rows, columns=BOX_COLUMNS)
    return df.astype({'index': int, 'class': int})


def save_dataset(outpath, split, samples, meta=None):
    """
    Write a split directory atomically.

    Input:
        outpath: dataset root
        split: split name ('train', 'val', ...)
        samples: list of Sample
        meta: optional dict stored in meta.yaml (n_samples and mean_pixel are added)
    """
    final = os.path.join(outpath, split)
    tmp = final + '.tmp'
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, 'images'))
    os.makedirs(os.path.join(tmp, 'masks'))
    for i, s in enumerate(samples):
        with open(os.path.join(tmp, 'images', f'{i:05d}.ppm'), 'wb') as f:
            f.write(encode_ppm(s.image))
        with open(os.path.join(tmp, 'masks', f'{i:05d}.pgm'), 'wb') as f:
            f.write(encode_pgm(s.mask))
    boxes_frame(samples).to_csv(os.path.join(tmp, 'boxes.csv'), index=False)
    meta = dict(meta or {})
    meta['n_samples'] = len(samples)
    meta['mean_pixel'] = [float(v) for v in mean_pixel(samples)] if samples else [0.0, 0.0, 0.0]
    with open(os.path.join(tmp, 'meta.yaml'), 'w') as f:
        yaml.dump(meta, f, sort_keys=True)
    if os.path.exists(final):
        shutil.rmtree(final)
    os.replace(tmp, final)


def load_dataset(outpath, split):
    """
    Read a split directory.

    Return:
        samples: list of Sample
        meta: dict from meta.yaml
    """
    path = os.path.join(outpath, split)
    if not os.path.isdir(path):
        raise RejectedInputError(f'Dataset split {path} not found')
    with open(os.path.join(path, 'meta.yaml'), 'r') as f:
        meta = yaml.load(f, Loader=yaml.FullLoader)
    df = pd.read_csv(os.path.join(path, 'boxes.csv'))
    groups = {i: g for i, g in df.groupby('index')}
    samples = []
    for i in range(meta['n_samples']):
        image = read_ppm(os.path.join(path, 'images', f'{i:05d}.ppm'))
        mask = read_pgm(os.path.join(path, 'masks', f'{i:05d}.pgm'))
        g = groups.get(i)
        if g is None:
            boxes, classes = np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
        else:
            boxes = g[['x0', 'y0', 'x1', 'y1']].to_numpy(dtype=np.float64)
            classes = g['class'].to_numpy(dtype=np.int64)
        samples.append(Sample(image=image, mask=mask, boxes=boxes, classes=classes))
    return samples, meta
