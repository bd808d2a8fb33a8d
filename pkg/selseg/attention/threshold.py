"""
Thresholded attention initialization: top-1 restricted to confident units.
"""

import numpy as np

from .signal import from_labels
from ..errors import RejectedInputError

__name__ = 'Threshold'
__fullname__ = 'Confidence Threshold'


def init_threshold(probs, theta_attention=0.9):
    """
    Input:
        probs: softmax-normalised per-unit scores (N, A, K) or (A, K)
        theta_attention: confidence threshold in (0, 1)

    Return:
        AttentionSignal active where the maximum probability exceeds theta_attention
    """
    if not 0 < theta_attention < 1:
        raise RejectedInputError(f'theta_attention must lie in (0, 1), got {theta_attention}')
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[None]
    labels = probs.argmax(axis=2)
    labels[probs.max(axis=2) <= theta_attention] = 0
    return from_labels(labels, probs.shape[2])


def init_attention(scores, theta_attention=0.9, **kwargs):
    return init_threshold(scores.probabilities(), theta_attention)
