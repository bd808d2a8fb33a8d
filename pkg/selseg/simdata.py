# Generate synthetic shape segmentation data

import numpy as np

from .dataio import Sample, tight_box
from .errors import RejectedInputError

# class k in 1..K-1 draws shape _SHAPES[(k-1) % 3]
_SHAPES = ['circle', 'square', 'triangle']
_MIN_CANVAS = 16


def shape_region(kind, size, canvas, top, left):
	"""
	Boolean region of one filled shape with bounding square (top, left, size).

	Input:
		kind: 'circle', 'square' or 'triangle'
		size: side of the bounding square in pixels
		canvas: (H, W) of the image
		top, left: upper-left corner of the bounding square
	"""
	h, w = canvas
	ys, xs = np.mgrid[0:h, 0:w]
	# pixel centres relative to the bounding square
	yc = ys + 0.5 - top
	xc = xs + 0.5 - left
	inside = (yc > 0) & (yc < size) & (xc > 0) & (xc < size)
	if kind == 'square':
		return inside
	if kind == 'circle':
		r = size / 2.0
		return inside & ((yc - r) ** 2 + (xc - r) ** 2 <= r ** 2)
	if kind == 'triangle':
		# apex at the top centre, base along the bottom edge
		return inside & (np.abs(xc - size / 2.0) <= yc / 2.0)
	raise RejectedInputError(f'Unknown shape {kind}')


def textured_background(rng, canvas):
	"""Smooth colour gradient with pixel noise, values in [0, 255]."""
	h, w = canvas
	base = rng.uniform(40, 200, size=3)
	tilt = rng.uniform(-40, 40, size=(3, 2))
	ys, xs = np.mgrid[0:h, 0:w]
	img = base[:, None, None] + tilt[:, 0, None, None] * ys / h + tilt[:, 1, None, None] * xs / w
	img = img + rng.normal(0, 8, size=(3, h, w))
	return np.clip(img, 0, 255)


def create_sample(rng, canvas=64, n_classes=4, max_shapes=3, max_attempts=50):
	"""
	One image with 1..max_shapes non-overlapping filled shapes.

	Return:
		Sample with uint8 image, uint8 mask and tight per-instance boxes
	"""
	h = w = canvas
	image = textured_background(rng, (h, w))
	mask = np.zeros((h, w), dtype=np.uint8)
	occupied = np.zeros((h, w), dtype=bool)
	boxes, classes = [], []
	n_shapes = rng.integers(1, max_shapes + 1)
	lo, hi = max(4, canvas // 8), max(5, int(canvas / 2.5))
	for _ in range(n_shapes):
		cls = int(rng.integers(1, n_classes))
		kind = _SHAPES[(cls - 1) % len(_SHAPES)]
		for _ in range(max_attempts):
			size = int(rng.integers(lo, hi + 1))
			top = int(rng.integers(0, h - size + 1))
			left = int(rng.integers(0, w - size + 1))
			region = shape_region(kind, size, (h, w), top, left)
			# keep a one pixel gap between instances
			grown = region.copy()
			grown[1:] |= region[:-1]
			grown[:-1] |= region[1:]
			grown[:, 1:] |= region[:, :-1]
			grown[:, :-1] |= region[:, 1:]
			if region.any() and not (grown & occupied).any():
				break
		else:
			continue
		colour = rng.uniform(0, 255, size=3)
		noise = rng.normal(0, 6, size=(3, h, w))
		image = np.where(region[None], np.clip(colour[:, None, None] + noise, 0, 255), image)
		mask[region] = cls
		occupied |= region
		boxes.append(tight_box(region))
		classes.append(cls)
	return Sample(image=np.rint(image).astype(np.uint8), mask=mask,
				  boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
				  classes=np.array(classes, dtype=np.int64))


def synth_generate(seed, n, canvas=64, n_classes=4):
	"""
	Generate a synthetic dataset of filled shapes on textured backgrounds.

	Input:
		seed: integer seed; sample i uses the stream default_rng([seed, i])
		n: number of samples
		canvas: image side in pixels (>= 16)
		n_classes: K including background (>= 2)

	Return:
		list of Sample
	"""
	if canvas < _MIN_CANVAS:
		raise RejectedInputError(f'Canvas must be at least {_MIN_CANVAS} pixels, got {canvas}')
	if n_classes < 2:
		raise RejectedInputError('Need background plus at least one shape class')
	if n < 0:
		raise RejectedInputError('Number of samples must be non-negative')
	return [create_sample(np.random.default_rng([seed, i]), canvas, n_classes) for i in range(n)]
