"""
Bottom-up encoder h = f(x; W_BU) with a per-layer activation trace.
"""

import numpy as np

from .tensor import Tensor, conv2d, maxpool2d, relu
from .errors import RejectedInputError, StateError


class ActivationTrace:
    """
    Hidden activities h_i of every executed layer, in execution order, plus the
    argmax indices of each maxpool layer.
    """
    def __init__(self, x):
        self.input = x
        self.h = {}
        self.argmax = {}
        self.order = []

    def record(self, name, h, argmax=None):
        self.h[name] = h
        self.order.append(name)
        if argmax is not None:
            self.argmax[name] = argmax

    def __getitem__(self, name):
        return self.h[name]

    def __contains__(self, name):
        return name in self.h

    def below(self, name):
        """Activity feeding layer `name` (the input tensor for the first layer)."""
        i = self.order.index(name)
        return self.input if i == 0 else self.h[self.order[i - 1]]

    def pool_indices(self, name):
        if name not in self.argmax:
            raise StateError(f'No argmax indices recorded for pooling layer {name}')
        return self.argmax[name]


def glorot_uniform(rng, shape):
    """
    Uniform in [-b, b] with b = sqrt(6/(fan_in+fan_out)) for a (Co, Ci, kh, kw) kernel.
    """
    co, ci, kh, kw = shape
    bound = np.sqrt(6.0 / (ci * kh * kw + co * kh * kw))
    return rng.uniform(-bound, bound, size=shape)


def init_conv(rng, weights, prefix, c_in, c_out, k, bias=True):
    """Add a Glorot-initialised kernel (and a zero bias) to a weight dict."""
    weights[f'{prefix}.weight'] = Tensor(glorot_uniform(rng, (c_out, c_in, k, k)), requires_grad=True)
    if bias:
        weights[f'{prefix}.bias'] = Tensor(np.zeros(c_out), requires_grad=True)


def init_layers(rng, layers, c_in, prefix, weights):
    """
    Initialise every parametric layer in a layer list.

    Return:
        output channel count after the last layer
    """
    for layer in layers:
        if layer.parametric:
            init_conv(rng, weights, f'{prefix}.{layer.name}', c_in, layer.out, layer.k)
            c_in = layer.out
    return c_in


def apply_layer(layer, x, weights, prefix):
    """
    Run one layer.

    Return:
        (output Tensor, argmax indices or None)
    """
    if layer.kind == 'relu':
        return relu(x), None
    if layer.kind == 'maxpool':
        return maxpool2d(x, k=layer.k, stride=layer.s)
    key = f'{prefix}.{layer.name}'
    if f'{key}.weight' not in weights:
        raise RejectedInputError(f'Missing weights for layer {key}')
    out = conv2d(x, weights[f'{key}.weight'], weights.get(f'{key}.bias'),
                 stride=layer.s, pad=layer.p, dilation=layer.d)
    return out, None


def forward_encode(x, spec, weights, until=None):
    """
    Bottom-up pass through the BU layers of a NetworkSpec.

    Input:
        x: Tensor (N, 3, H, W)
        spec: NetworkSpec
        weights: dict 'bu.<layer>.weight' / 'bu.<layer>.bias' -> Tensor
        until: optional layer name; layers above it are skipped

    Return:
        h: activation of the last executed layer
        trace: ActivationTrace
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.input_channels:
        raise RejectedInputError(f'Encoder expects (N, {spec.input_channels}, H, W) input, got {x.shape}')
    # raises on incompatible spatial extent before any work
    spec.shapes(x.shape[2], x.shape[3])
    trace = ActivationTrace(x)
    h = x
    for layer in spec.layers:
        h, argmax = apply_layer(layer, h, weights, 'bu')
        trace.record(layer.name, h, argmax)
        if layer.name == until:
            break
    return h, trace
