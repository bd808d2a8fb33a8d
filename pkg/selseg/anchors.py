"""
Anchor boxes, IoU and target assignment/sampling for the LSD head.
"""

from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError

IGNORE_LABEL = 255


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in input pixels, half-open [x0, x1) x [y0, y1)."""
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise RejectedInputError(f'Degenerate box {self}')

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_array(self):
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)


@dataclass
class LossConfig:
    """Target assignment thresholds, sampling budget and the segmentation loss weight."""
    alpha_loss: float = 1.0
    theta_pos: float = 0.5
    theta_neg: float = 0.3
    max_targets: int = 128
    neg_ratio: int = 3

    def __post_init__(self):
        if not 0 <= self.theta_neg < self.theta_pos <= 1:
            raise RejectedInputError('Need 0 <= theta_neg < theta_pos <= 1')
        if self.max_targets < 1 or self.neg_ratio < 0 or self.alpha_loss < 0:
            raise RejectedInputError('Invalid loss configuration')


def _boxes(boxes):
    arr = np.array([b.as_array() if isinstance(b, Box) else b for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a, b):
    """Intersection over union of two boxes."""
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(boxes1, boxes2):
    """
    Pairwise IoU.

    Input:
        boxes1: (N, 4) array or list of Box
        boxes2: (M, 4) array or list of Box

    Return:
        array (N, M)
    """
    b1 = _boxes(boxes1)[:, None, :]
    b2 = _boxes(boxes2)[None, :, :]
    x0 = np.maximum(b1[..., 0], b2[..., 0])
    y0 = np.maximum(b1[..., 1], b2[..., 1])
    x1 = np.minimum(b1[..., 2], b2[..., 2])
    y1 = np.minimum(b1[..., 3], b2[..., 3])
    inter = np.maximum(0.0, x1 - x0) * np.maximum(0.0, y1 - y0)
    area1 = (b1[..., 2] - b1[..., 0]) * (b1[..., 3] - b1[..., 1])
    area2 = (b2[..., 2] - b2[..., 0]) * (b2[..., 3] - b2[..., 1])
    return inter / (area1 + area2 - inter)


def assign_targets(anchors, gt_boxes, gt_classes, cfg=None):
    """
    Per-anchor target labels.

    An anchor takes the class of its best-overlapping gt box (first box on
    ties) when IoU > theta_pos, background 0 when the best IoU < theta_neg and
    the don't-care label 255 otherwise. Afterwards every gt box forces its own
    best anchor (lowest index on ties) to its class; later boxes win conflicts.

    Input:
        anchors: (A, 4) array of x0, y0, x1, y1
        gt_boxes: (G, 4) array or list of Box
        gt_classes: G class labels in 1..K-1
        cfg: LossConfig

    Return:
        int array (A,)
    """
    cfg = cfg or LossConfig()
    anchors = _boxes(anchors)
    if len(anchors) == 0:
        raise RejectedInputError('assign_targets needs at least one anchor')
    gt = _boxes(gt_boxes)
    classes = np.asarray(gt_classes, dtype=np.int64)
    if len(gt) == 0:
        return np.zeros(len(anchors), dtype=np.int64)
    overlaps = iou_matrix(anchors, gt)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(anchors)), best_gt]
    targets = np.full(len(anchors), IGNORE_LABEL, dtype=np.int64)
    targets[best_iou < cfg.theta_neg] = 0
    positive = best_iou > cfg.theta_pos
    targets[positive] = classes[best_gt[positive]]
    for j, anchor in enumerate(overlaps.argmax(axis=0)):
        targets[anchor] = classes[j]
    return targets


def sample_targets(targets, rng, cfg=None):
    """
    Random subset of one image's targets within the sampling budget; the rest become 255.

    Positives are kept up to max_targets; negatives up to
    min(neg_ratio * positives, max_targets - positives), or max_targets when
    there are no positives.

    Input:
        targets: 1-D int array of unit labels of one image
        rng: numpy Generator or integer seed
        cfg: LossConfig

    Return:
        int array with the same shape
    """
    cfg = cfg or LossConfig()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    flat = np.asarray(targets, dtype=np.int64)
    if flat.ndim != 1:
        raise RejectedInputError(f'sample_targets expects the labels of one image, got shape {flat.shape}')
    out = np.full_like(flat, IGNORE_LABEL)
    pos = np.flatnonzero((flat != 0) & (flat != IGNORE_LABEL))
    neg = np.flatnonzero(flat == 0)
    if len(pos) > cfg.max_targets:
        pos = np.sort(rng.choice(pos, cfg.max_targets, replace=False))
    n_neg = min(cfg.neg_ratio * len(pos), cfg.max_targets - len(pos)) if len(pos) else cfg.max_targets
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    out[pos] = flat[pos]
    out[neg] = 0
    return out


def sample_batch_targets(targets, rng, cfg=None):
    """
    Apply sample_targets to each image of an (N, A) target batch, in row order.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 2:
        raise RejectedInputError(f'sample_batch_targets expects (N, A) labels, got shape {targets.shape}')
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if len(targets) == 0:
        return targets.copy()
    return np.stack([sample_targets(row, rng, cfg) for row in targets])
