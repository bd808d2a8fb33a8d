"""
Selective Segmentation Network: BU encoder, LSD head, attention
initialisation, TD selection and the gated segmentation decoder.
"""

import importlib
from dataclasses import dataclass

import numpy as np

from .anchors import assign_targets
from .decoder import decode, init_decoder, predict_mask, MODULATIONS
from .encoder import forward_encode, init_layers
from .lsd import lsd_forward, init_lsd, anchor_grid
from .selection import td_pass
from .tensor import Tensor
from .errors import RejectedInputError

# import all attention initialization strategies
from .attention import __all__ as _strategy_names
_strategies = {}
for strategy_name in _strategy_names:
    _strategies[strategy_name] = importlib.import_module('.attention.' + strategy_name, package='selseg')
strategy_fullnames = {name: module.__fullname__ for name, module in _strategies.items()}

PARAM_GROUPS = ('bu', 'lsd', 'seg')


@dataclass
class SSNOutput:
    trace: object
    scores: object
    signal: object
    gating: object
    state: object

    @property
    def logits(self):
        return self.state.logits


class SSN:
    """
    Selective Segmentation Network

    Input:
        spec: NetworkSpec
        n_classes: K including background
        modulation: decoder fusion, one of 'add', 'mul', 'concat'
        n_levels: decoder levels M (default: all levels of spec)
        alpha_td: TD stage-2 fusion factor
        seed: weight initialisation seed
        weights: optional dict name -> Tensor (initialised from seed if missing)
    """
    def __init__(self, spec, n_classes=4, modulation='mul', n_levels=None, alpha_td=0.2, seed=0, weights=None):
        if modulation not in MODULATIONS:
            raise RejectedInputError(f'Unknown modulation {modulation}')
        if n_classes < 2:
            raise RejectedInputError('Need at least two classes')
        n_levels = n_levels or len(spec.levels)
        if not 1 <= n_levels <= len(spec.levels):
            raise RejectedInputError(f'levels must lie in 1..{len(spec.levels)}, got {n_levels}')
        self.spec = spec
        self.n_classes = n_classes
        self.modulation = modulation
        self.n_levels = n_levels
        self.alpha_td = alpha_td
        self.weights = self.init_weights(seed)
        if weights is not None:
            self.load_weights(weights)
        self._anchors = {}

    def init_weights(self, seed):
        """Glorot-initialised kernels and zero biases for all parameter groups."""
        rng = np.random.default_rng(seed)
        weights = {}
        init_layers(rng, self.spec.layers, self.spec.input_channels, 'bu', weights)
        init_lsd(rng, self.spec, self.n_classes, weights)
        init_decoder(rng, self.spec, self.n_classes, self.modulation, self.n_levels, weights)
        return weights

    def load_weights(self, arrays, strict=False):
        """
        Copy arrays into the parameter registry.

        Input:
            arrays: dict name -> array or Tensor
            strict: if True every registry entry must be present
        """
        for name, value in arrays.items():
            if name not in self.weights:
                raise RejectedInputError(f'Unknown parameter {name}')
            data = np.asarray(getattr(value, 'data', value), dtype=np.float64)
            if data.shape != self.weights[name].shape:
                raise RejectedInputError(f'Parameter {name}: shape {data.shape} != {self.weights[name].shape}')
            self.weights[name] = Tensor(data.copy(), requires_grad=True)
        missing = set(self.weights) - set(arrays)
        if strict and missing:
            raise RejectedInputError(f'Missing parameters: {sorted(missing)}')

    def parameters(self, groups=PARAM_GROUPS):
        """Registry subset whose names start with one of the given groups."""
        return {name: p for name, p in self.weights.items() if name.split('.')[0] in groups}

    def parameter_count(self, groups=PARAM_GROUPS):
        return int(sum(p.data.size for p in self.parameters(groups).values()))

    def zero_grad(self):
        for p in self.weights.values():
            p.grad = None

    def anchors(self, height, width):
        """Anchor boxes (A, 4) of the LSD units for an input extent."""
        key = (height, width)
        if key not in self._anchors:
            self._anchors[key] = anchor_grid(self.spec, height, width, self.n_classes)
        return self._anchors[key]

    def unit_targets(self, boxes, classes, height, width, cfg=None):
        """assign_targets for each sample of a batch; returns (N, A)."""
        anchors = self.anchors(height, width)
        return np.stack([assign_targets(anchors, b, c, cfg) for b, c in zip(boxes, classes)])

    def detect(self, x):
        """
        BU pass to the LSD tap followed by the LSD head.

        Return:
            trace: ActivationTrace
            scores: ScoreMaps
        """
        h, trace = forward_encode(x, self.spec, self.weights, until=self.spec.lsd_tap)
        scores = lsd_forward(h, self.spec.lsd, self.weights, tap=self.spec.lsd_tap)
        return trace, scores

    def attend(self, scores, strategy='threshold', targets=None, theta_attention=0.9):
        """Attention signal from one of the registered strategies ('gt', 'top1', 'threshold')."""
        if strategy not in _strategies:
            raise RejectedInputError(f'Unknown attention strategy {strategy}, expected one of {_strategy_names}')
        return _strategies[strategy].init_attention(scores, targets=targets, theta_attention=theta_attention)

    def forward(self, x, strategy='threshold', targets=None, theta_attention=0.9, inputs='both'):
        """
        Full SSN pass.

        Input:
            x: normalised input (N, 3, H, W)
            strategy: attention initialisation strategy
            targets: per-unit anchor targets (N, A), needed by the 'gt' strategy
            theta_attention: threshold of the 'threshold' strategy
            inputs: decoder inputs 'both', 'bu' or 'td'

        Return:
            SSNOutput
        """
        trace, scores = self.detect(x)
        signal = self.attend(scores, strategy, targets, theta_attention)
        gating = td_pass(signal, trace, scores, self.spec, self.weights, self.alpha_td)
        state = decode(trace, gating, scores, self.spec, self.weights, self.modulation, self.n_levels, inputs)
        return SSNOutput(trace, scores, signal, gating, state)

    def predict(self, x, **kwargs):
        """Predicted label masks (N, H, W)."""
        return predict_mask(self.forward(x, **kwargs).logits)
