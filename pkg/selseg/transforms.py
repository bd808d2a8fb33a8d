"""
Resize, crop and pad transforms for training and evaluation samples.

Images are resampled bilinearly, masks with nearest neighbours. Boxes are
scaled and shifted with the image; boxes that become degenerate or lose all
pixels of their class are dropped.
"""

import numpy as np
from scipy import ndimage

from .dataio import Sample, box_mask_consistent
from .errors import RejectedInputError

IGNORE_LABEL = 255


def _source_coords(n_out, n_in):
    """Source pixel coordinates of output pixel centres for a resize n_in -> n_out."""
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_sample(sample, out_h, out_w):
    """Resize image (bilinear), mask (nearest) and boxes to (out_h, out_w)."""
    _, h, w = sample.image.shape
    if (out_h, out_w) == (h, w):
        return Sample(image=sample.image.astype(np.float64), mask=sample.mask.copy(),
                      boxes=sample.boxes.copy(), classes=sample.classes.copy())
    ys, xs = np.meshgrid(_source_coords(out_h, h), _source_coords(out_w, w), indexing='ij')
    image = np.stack([ndimage.map_coordinates(channel.astype(np.float64), [ys, xs], order=1, mode='nearest')
                      for channel in sample.image])
    rows = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    mask = sample.mask[rows[:, None], cols[None, :]]
    boxes = sample.boxes * np.array([out_w / w, out_h / h, out_w / w, out_h / h])
    return Sample(image=image, mask=mask, boxes=boxes, classes=sample.classes.copy())


def clean_boxes(sample):
    """Clip boxes to the image and drop degenerate or mask-inconsistent ones."""
    h, w = sample.mask.shape
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    keep = []
    for i, (box, cls) in enumerate(zip(boxes, sample.classes)):
        if box[2] > box[0] and box[3] > box[1]:
            single = Sample(image=sample.image, mask=sample.mask, boxes=box[None], classes=np.array([cls]))
            if box_mask_consistent(single):
                keep.append(i)
    return Sample(image=sample.image, mask=sample.mask, boxes=boxes[keep].reshape(-1, 4),
                  classes=sample.classes[keep])


def train_transform(sample, target=64, rng=None):
    """
    Resize the smallest side to target, then take a random target x target crop.

    Input:
        sample: Sample
        target: output side L
        rng: numpy Generator (crop offsets)
    """
    if target < 1:
        raise RejectedInputError('Transform target must be positive')
    rng = rng if rng is not None else np.random.default_rng(0)
    _, h, w = sample.image.shape
    factor = target / min(h, w)
    out_h, out_w = max(target, int(round(h * factor))), max(target, int(round(w * factor)))
    resized = resize_sample(sample, out_h, out_w)
    top = int(rng.integers(0, out_h - target + 1))
    left = int(rng.integers(0, out_w - target + 1))
    cropped = Sample(image=resized.image[:, top:top + target, left:left + target],
                     mask=resized.mask[top:top + target, left:left + target],
                     boxes=resized.boxes - np.array([left, top, left, top]),
                     classes=resized.classes)
    return clean_boxes(cropped)


def eval_transform(sample, target=64, mean_pixel=None):
    """
    Resize the largest side to target and pad bottom/right to target x target.

    Image padding uses the dataset mean pixel, mask padding the don't-care label.
    """
    if target < 1:
        raise RejectedInputError('Transform target must be positive')
    _, h, w = sample.image.shape
    factor = target / max(h, w)
    out_h, out_w = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    resized = resize_sample(sample, out_h, out_w)
    fill = np.zeros(3) if mean_pixel is None else np.asarray(mean_pixel, dtype=np.float64)
    image = np.broadcast_to(fill[:, None, None], (3, target, target)).copy()
    image[:, :out_h, :out_w] = resized.image
    mask = np.full((target, target), IGNORE_LABEL, dtype=np.uint8)
    mask[:out_h, :out_w] = resized.mask
    return clean_boxes(Sample(image=image, mask=mask, boxes=resized.boxes, classes=resized.classes))


def normalize_image(image, mean_pixel):
    """Network input (x - mean) / 255 with shape (3, H, W)."""
    return (np.asarray(image, dtype=np.float64) - np.asarray(mean_pixel, dtype=np.float64)[:, None, None]) / 255.0
