"""
Loose Spatial Detection head: multi-scale class score maps s = c(h; W_LSD).

Each group applies its intermediate layers l_i and a collapsed prediction layer
c_i with K outputs. In the parallel design every group reads the BU tap h; in
the sequential design group i reads the output of group i-1's intermediates.

Units are flattened group-major, then row-major within each map, giving the
A x K view used by attention initialisation, anchors and the LSD loss.
"""

from dataclasses import dataclass

import numpy as np

from .architecture import RFGeometry, compose_rf
from .encoder import apply_layer, init_conv
from .tensor import Tensor, softmax_array
from .errors import RejectedInputError


@dataclass
class LsdNode:
    """One executed LSD layer and the trace key of the activity it consumed."""
    name: str
    layer: object
    source: str
    group: int


class LsdTrace:
    """Activities of every LSD layer, with the graph needed for the TD pass."""
    def __init__(self, tap, h):
        self.tap = tap
        self.h = {tap: h}
        self.argmax = {}
        self.nodes = []

    def record(self, node, out, argmax=None):
        self.nodes.append(node)
        self.h[node.name] = out
        if argmax is not None:
            self.argmax[node.name] = argmax


class ScoreMaps:
    """
    Per-group score tensors s_i (N, K, H_i, W_i) and their flattened (N, A, K) view.
    """
    def __init__(self, maps, trace=None):
        self.maps = maps
        self.trace = trace
        self.shapes = [m.shape[2:] for m in maps]
        self.unit_counts = [h * w for h, w in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(self.unit_counts)]).astype(int)

    @property
    def n_units(self):
        return int(self.offsets[-1])

    @property
    def n_classes(self):
        return self.maps[0].shape[1]

    def flat(self):
        """Raw scores as an array (N, A, K)."""
        n, k = self.maps[0].shape[:2]
        return np.concatenate([m.data.reshape(n, k, -1) for m in self.maps], axis=2).transpose(0, 2, 1)

    def probabilities(self):
        """Per-unit softmax over classes, (N, A, K)."""
        return softmax_array(self.flat(), axis=2)

    def unit_index(self, group, y, x):
        h, w = self.shapes[group]
        if not (0 <= y < h and 0 <= x < w):
            raise RejectedInputError(f'Position ({y}, {x}) outside group {group} map {h}x{w}')
        return int(self.offsets[group]) + y * w + x

    def unit_position(self, index):
        """Flattened unit index -> (group, y, x)."""
        if not 0 <= index < self.n_units:
            raise RejectedInputError(f'Unit index {index} outside 0..{self.n_units - 1}')
        group = int(np.searchsorted(self.offsets, index, side='right') - 1)
        y, x = divmod(index - int(self.offsets[group]), self.shapes[group][1])
        return group, int(y), int(x)


def group_chains(spec, n_classes):
    """
    Layer chain from the input image to each group's prediction layer.

    Return:
        list of LayerSpec lists, one per group
    """
    bu = spec.layers[:spec.index(spec.lsd_tap) + 1]
    chains, previous = [], []
    for group in spec.lsd.groups:
        own = group.layers + [group.prediction(n_classes)]
        chains.append(bu + previous + own)
        if spec.lsd.design == 'sequential':
            previous = previous + group.layers
    return chains


def group_geometries(spec, n_classes=2):
    """Input-space receptive field of one unit of each group's score map."""
    return [compose_rf(chain) for chain in group_chains(spec, n_classes)]


def init_lsd(rng, spec, n_classes, weights):
    """Glorot-initialise all LSD layers ('lsd.<group layer>.weight/bias')."""
    c_tap = spec.channels_out(spec.lsd_tap)
    c_prev = c_tap
    for group in spec.lsd.groups:
        c_in = c_tap if spec.lsd.design == 'parallel' else c_prev
        for layer in group.layers:
            if layer.parametric:
                init_conv(rng, weights, f'lsd.{layer.name}', c_in, layer.out, layer.k)
                c_in = layer.out
        c_prev = c_in
        init_conv(rng, weights, f'lsd.g{group.index}.pred', c_in, n_classes, 1)


def lsd_forward(h, lsd, weights, tap='tap'):
    """
    Score maps of all LSD groups.

    Input:
        h: Tensor (N, C, H, W) from the BU tap
        lsd: LsdSpec (design and groups)
        weights: dict with 'lsd.*' entries
        tap: trace key under which h is recorded

    Return:
        ScoreMaps (with .trace set to the LsdTrace)
    """
    if lsd.design not in ('parallel', 'sequential'):
        raise RejectedInputError(f'Unknown LSD design {lsd.design}')
    trace = LsdTrace(tap, h)
    maps = []
    source = tap
    for group in lsd.groups:
        if lsd.design == 'parallel':
            source = tap
        x = trace.h[source]
        for layer in group.layers:
            x, argmax = apply_layer(layer, x, weights, 'lsd')
            trace.record(LsdNode(layer.name, layer, source, group.index), x, argmax)
            source = layer.name
        key = f'lsd.g{group.index}.pred.weight'
        if key not in weights:
            raise RejectedInputError(f'Missing weights for {key}')
        pred = group.prediction(weights[key].shape[0])
        s, _ = apply_layer(pred, x, weights, 'lsd')
        trace.record(LsdNode(pred.name, pred, source, group.index), s)
        maps.append(s)
    if len({m.shape[1] for m in maps}) > 1:
        raise RejectedInputError('LSD groups disagree on the number of classes')
    return ScoreMaps(maps, trace=trace)


@dataclass
class UnitGeometry:
    group: int
    y: int
    x: int
    rf: RFGeometry
    box: tuple


def unit_box(rf, y, x, height, width):
    """Square box of side rf.size centred on the unit's projection, clipped to the image."""
    cy, cx = rf.center(y), rf.center(x)
    half = rf.size / 2.0
    return (max(cx - half, 0.0), max(cy - half, 0.0),
            min(cx + half, float(width)), min(cy + half, float(height)))


def lsd_unit_geometry(spec, index, height, width, n_classes=2):
    """
    Receptive field and anchor box of a flattened LSD unit.

    Input:
        spec: NetworkSpec
        index: unit index in 0..A-1
        height, width: input image extent

    Return:
        UnitGeometry
    """
    maps = ScoreMaps([Tensor(np.zeros((1, n_classes) + s)) for s in lsd_map_shapes(spec, height, width)])
    group, y, x = maps.unit_position(index)
    rf = group_geometries(spec, n_classes)[group]
    return UnitGeometry(group, y, x, rf, unit_box(rf, y, x, height, width))


def lsd_map_shapes(spec, height, width, n_classes=2):
    """Spatial extent (H_i, W_i) of each group's score map."""
    shapes = []
    for chain in group_chains(spec, n_classes):
        h, w = height, width
        for layer in chain:
            h, w = layer.output_extent(h), layer.output_extent(w)
            if h < 1 or w < 1:
                raise RejectedInputError(f'Input {height}x{width} too small for LSD layer {layer.name}')
        shapes.append((h, w))
    return shapes


def anchor_grid(spec, height, width, n_classes=2):
    """
    Anchor boxes of all A units, in flattened order.

    Return:
        array (A, 4) of x0, y0, x1, y1
    """
    boxes = []
    for rf, (h, w) in zip(group_geometries(spec, n_classes), lsd_map_shapes(spec, height, width, n_classes)):
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing='ij')
        cy, cx = rf.offset + ys.ravel() * rf.jump, rf.offset + xs.ravel() * rf.jump
        half = rf.size / 2.0
        boxes.append(np.stack([np.maximum(cx - half, 0.0), np.maximum(cy - half, 0.0),
                               np.minimum(cx + half, float(width)), np.minimum(cy + half, float(height))], axis=1))
    return np.concatenate(boxes, axis=0)
