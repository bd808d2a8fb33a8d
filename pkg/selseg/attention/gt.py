"""
Ground-truth attention initialization: units seeded from their anchor targets.
"""

from .signal import from_labels
from ..errors import RejectedInputError

__name__ = 'GT'
__fullname__ = 'Ground-Truth Anchor Targets'


def init_ground_truth(targets, n_classes):
    """
    Input:
        targets: per-unit labels (N, A) in {0..K-1} or 255
        n_classes: K

    Return:
        AttentionSignal with d_ij = 1 where t_i = j, j != 0
    """
    return from_labels(targets, n_classes)


def init_attention(scores, targets=None, **kwargs):
    if targets is None:
        raise RejectedInputError('Ground-truth initialization needs anchor targets')
    return init_ground_truth(targets, scores.n_classes)
