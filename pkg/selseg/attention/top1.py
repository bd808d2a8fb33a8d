"""
Top-1 attention initialization: each unit attends to its most probable class.
"""

import numpy as np

from .signal import from_labels

__name__ = 'Top1'
__fullname__ = 'Top-1 Class'


def init_top1(probs):
    """
    Input:
        probs: per-unit class probabilities (N, A, K) or (A, K)

    Return:
        AttentionSignal; units whose argmax is background stay inactive.
        Ties resolve to the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[None]
    return from_labels(probs.argmax(axis=2), probs.shape[2])


def init_attention(scores, **kwargs):
    return init_top1(scores.probabilities())
