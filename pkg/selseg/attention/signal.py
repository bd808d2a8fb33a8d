"""
Attention signal d: one-hot (unit, class) seeds of the top-down pass.
"""

import numpy as np

from ..errors import RejectedInputError

IGNORE_LABEL = 255


class AttentionSignal:
    """
    One-hot attention tensor d with shape (N, A, K).

    At most one class bit is set per unit and background (class 0) is never active.
    """
    def __init__(self, d):
        d = np.asarray(d, dtype=np.int8)
        if d.ndim != 3:
            raise RejectedInputError(f'Attention signal must be (N, A, K), got {d.shape}')
        assert (d.sum(axis=2) <= 1).all(), 'more than one active class per unit'
        assert not d[:, :, 0].any(), 'background class activated'
        self.d = d

    @property
    def shape(self):
        return self.d.shape

    @property
    def active(self):
        """List of active (sample, unit, class) triples in raster order."""
        return [tuple(int(v) for v in row) for row in np.argwhere(self.d)]

    def active_units(self, sample=0):
        """List of (unit, class) pairs active for one sample."""
        return [(int(a), int(k)) for a, k in np.argwhere(self.d[sample])]

    def __len__(self):
        return int(self.d.sum())

    def subset(self, keep):
        """Signal restricted to a boolean (N, A) unit mask."""
        return AttentionSignal(self.d * np.asarray(keep, dtype=np.int8)[:, :, None])


def from_labels(labels, n_classes):
    """
    One-hot signal from per-unit labels; 0 and the ignore label stay inactive.

    Input:
        labels: int array (N, A)
        n_classes: K
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
    d = np.zeros(labels.shape + (n_classes,), dtype=np.int8)
    fg = (labels > 0) & (labels != IGNORE_LABEL)
    if (labels[fg] >= n_classes).any():
        raise RejectedInputError('Target label outside class range')
    n_idx, a_idx = np.nonzero(fg)
    d[n_idx, a_idx, labels[fg]] = 1
    return AttentionSignal(d)
