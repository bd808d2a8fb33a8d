"""
Input perturbations for robustness measurements.

- uniform: additive noise from [-255*sigma/2, 255*sigma/2], clamped to [0, 255]
- salt-pepper: each pixel set to 0 or 255 (equal odds) with probability sigma
- box-occlusion: one black square of side floor(sigma * min(H, W))
"""

from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError

PERTURB_KINDS = ('uniform', 'salt-pepper', 'box-occlusion')
SIGMA_GRID = (0.0, 0.25, 0.45, 0.65)


@dataclass
class PerturbSpec:
    kind: str
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise RejectedInputError(f'Unknown perturbation {self.kind}, expected one of {PERTURB_KINDS}')
        if not 0 <= self.sigma <= 1:
            raise RejectedInputError(f'sigma must lie in [0, 1], got {self.sigma}')


def perturb(x, spec, rng=None):
    """
    Perturbed copy of an image.

    Input:
        x: array (3, H, W) with values in [0, 255]
        spec: PerturbSpec
        rng: optional Generator; defaults to default_rng(spec.seed)

    Return:
        float64 array (3, H, W)
    """
    out = np.array(x, dtype=np.float64)
    if spec.sigma == 0:
        return out
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    _, h, w = out.shape
    if spec.kind == 'uniform':
        half = 255.0 * spec.sigma / 2.0
        return np.clip(out + rng.uniform(-half, half, size=out.shape), 0.0, 255.0)
    if spec.kind == 'salt-pepper':
        hit = rng.random((h, w)) < spec.sigma
        salt = rng.random((h, w)) < 0.5
        out[:, hit] = np.where(salt[hit], 255.0, 0.0)
        return out
    side = int(np.floor(spec.sigma * min(h, w)))
    if side > 0:
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        out[:, top:top + side, left:left + side] = 0.0
    return out
