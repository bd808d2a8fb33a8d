"""
Segmentation decoder o = m(h_i, g_i; W_seg).

Each level i modulates BU features b^BU(h_i) with TD features b^TD(g_i),
reduces them with r, fuses the result with the output of the level above
through q and upsamples by 2 until the next consumer's resolution is reached.
Level 1 fuses with the raw LSD scores of group 0. A 3x3 and a 1x1 convolution
form the prediction head.
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .encoder import init_conv
from .tensor import Tensor, add, mul, concat_channels, conv2d, relu, bilinear_upsample2x
from .errors import RejectedInputError

MODULATIONS = ('add', 'mul', 'concat')
DECODER_INPUTS = ('both', 'bu', 'td')


@dataclass
class SegState:
    """Outputs o_i of the decoder levels and the final score map o."""
    levels: List[Tensor] = field(default_factory=list)
    logits: Tensor = None


def modulate(u, v, mode):
    """
    Fuse BU and TD features: elementwise sum, elementwise product or channel concatenation.
    """
    if mode == 'add':
        return add(u, v)
    if mode == 'mul':
        return mul(u, v)
    if mode == 'concat':
        return concat_channels(u, v)
    raise RejectedInputError(f'Unknown modulation {mode}, expected one of {MODULATIONS}')


def _conv3(x, weights, key, bias=True):
    return conv2d(x, weights[f'{key}.weight'], weights.get(f'{key}.bias') if bias else None, pad=1)


def upsample_to(x, height, width):
    """Repeated x2 bilinear upsampling until the extent equals (height, width)."""
    while x.shape[2] < height and x.shape[3] < width:
        x = bilinear_upsample2x(x)
    if x.shape[2:] != (height, width):
        raise RejectedInputError(f'Cannot upsample {x.shape[2:]} to {height}x{width} by factors of 2')
    return x


def seg_layer(h, g, o_above, level, weights, mode='mul', inputs='both', out_size=None):
    """
    One decoder level.

    Input:
        h: BU activity h_i (Tensor)
        g: gating g_i (array, same shape as h); enters as a constant
        o_above: output of the level above, or LSD group-0 scores for level 1
        level: SegLevelSpec
        weights: parameter dict with 'seg.l<i>.*' entries
        mode: modulation in {add, mul, concat}
        inputs: 'both', or 'bu' / 'td' to feed a single branch
        out_size: (H, W) of the next consumer; defaults to twice the input extent

    Return:
        o_i (Tensor)
    """
    if inputs not in DECODER_INPUTS:
        raise RejectedInputError(f'Unknown decoder inputs {inputs}')
    g = Tensor(getattr(g, 'data', g))
    if g.shape != h.shape:
        raise RejectedInputError(f'Gating {g.shape} and activity {h.shape} differ in shape')
    key = f'seg.l{level.index}'
    u = relu(_conv3(h, weights, f'{key}.bu')) if inputs != 'td' else None
    v = relu(_conv3(g, weights, f'{key}.td', bias=False)) if inputs != 'bu' else None
    if inputs == 'both':
        m = modulate(u, v, mode)
    else:
        # the blocked branch is bypassed; concat keeps its channel slot as zeros
        branch = u if u is not None else v
        if mode == 'concat':
            blank = Tensor(np.zeros(branch.shape))
            m = concat_channels(branch, blank) if inputs == 'bu' else concat_channels(blank, branch)
        else:
            m = branch
    r = relu(_conv3(m, weights, f'{key}.r'))
    q = relu(_conv3(concat_channels(r, o_above), weights, f'{key}.q'))
    if out_size is None:
        out_size = (2 * h.shape[2], 2 * h.shape[3])
    return upsample_to(q, *out_size)


def seg_head(o, weights):
    """K-channel logits from the last level output: 3x3 conv + ReLU, then 1x1 conv."""
    x = relu(_conv3(o, weights, 'seg.head.conv'))
    return conv2d(x, weights['seg.head.pred.weight'], weights['seg.head.pred.bias'])


def predict_mask(o):
    """Per-pixel argmax class (N, H, W); ties resolve to the lowest index."""
    return np.argmax(getattr(o, 'data', o), axis=1)


def init_decoder(rng, spec, n_classes, mode, n_levels, weights):
    """Glorot-initialise decoder levels 1..n_levels and the head."""
    c_above = n_classes
    for level in spec.levels[:n_levels]:
        c_h = spec.channels_out(level.tap)
        key = f'seg.l{level.index}'
        init_conv(rng, weights, f'{key}.bu', c_h, level.b, 3)
        init_conv(rng, weights, f'{key}.td', c_h, level.b, 3, bias=False)
        init_conv(rng, weights, f'{key}.r', 2 * level.b if mode == 'concat' else level.b, level.r, 3)
        init_conv(rng, weights, f'{key}.q', level.r + c_above, level.q, 3)
        c_above = level.q
    init_conv(rng, weights, 'seg.head.conv', c_above, c_above, 3)
    init_conv(rng, weights, 'seg.head.pred', c_above, n_classes, 1)


def decode(trace, gating, scores, spec, weights, mode='mul', n_levels=None, inputs='both'):
    """
    Run decoder levels 1..M and the head.

    Input:
        trace: ActivationTrace of the BU pass
        gating: GatingTrace of the TD pass
        scores: ScoreMaps (group 0 feeds level 1)
        spec: NetworkSpec
        n_levels: M (default: all levels in spec)

    Return:
        SegState with logits at input resolution
    """
    levels = spec.levels[:n_levels] if n_levels else spec.levels
    if not levels:
        raise RejectedInputError('Decoder needs at least one level')
    height, width = trace.input.shape[2:]
    state = SegState()
    o = scores.maps[0]
    for i, level in enumerate(levels):
        h = trace[level.tap]
        if o.shape[2:] != h.shape[2:]:
            raise RejectedInputError(f'Level {level.index}: input {o.shape[2:]} does not match tap {h.shape[2:]}')
        nxt = trace[levels[i + 1].tap].shape[2:] if i + 1 < len(levels) else (height, width)
        o = seg_layer(h, gating[level.tap], o, level, weights, mode, inputs, nxt)
        state.levels.append(o)
    state.logits = seg_head(o, weights)
    return state
