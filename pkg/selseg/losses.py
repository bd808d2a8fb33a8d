"""
Loss heads: LSD detection loss, segmentation loss and their weighted sum.
"""

import numpy as np

from .tensor import Tensor, add, cross_entropy, scale

IGNORE_LABEL = 255


def lsd_loss(scores, targets):
    """
    Mean negative log-likelihood of the per-unit class softmax at the targets.

    Input:
        scores: ScoreMaps
        targets: int array (N, A); 255 entries are excluded

    Return:
        scalar Tensor; 0 with zero gradient when every unit is don't-care
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(scores.maps[0].shape[0], -1)
    total = None
    for g, s in enumerate(scores.maps):
        labels = targets[:, scores.offsets[g]:scores.offsets[g + 1]].reshape((s.shape[0],) + s.shape[2:])
        term = cross_entropy(s, labels, IGNORE_LABEL, reduction='sum')
        total = term if total is None else add(total, term)
    count = int((targets != IGNORE_LABEL).sum())
    return scale(total, 1.0 / max(count, 1))


def seg_loss(logits, mask):
    """Mean per-pixel negative log-likelihood over pixels not labelled 255."""
    return cross_entropy(logits, mask, IGNORE_LABEL, reduction='mean')


def total_loss(loss_lsd, loss_seg, alpha_loss=1.0):
    """L_D + alpha_loss * L_S for floats or scalar Tensors."""
    if isinstance(loss_lsd, Tensor) or isinstance(loss_seg, Tensor):
        return add(loss_lsd, scale(loss_seg, alpha_loss))
    return loss_lsd + alpha_loss * loss_seg
