"""
Top-down selection pass g = n(d, h, W_BU, W_LSD).

The pass starts from the attention signal at the LSD prediction layers and
walks the executed layers in reverse. At every gated output node of a
convolution the post-synaptic (PS) activities ps_k = w_k * h_k over its
receptive field go through three stages:

1. competition: winners are PS values at or above the mean of the strictly
   positive PS values;
2. selection: winners are grouped into 4-connected components in the input
   plane and the best scoring component is kept (WTA for 1x1 layers);
3. propagation: the parent gate is split over the selected contributors in
   proportion to their PS values.

Maxpool layers route the whole gate to the stored argmax, ReLU layers pass the
gate where their input is positive. Gates are plain arrays, never part of the
differentiation graph.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import StateError

# PS entries evaluated per chunk of active nodes
_CHUNK_ENTRIES = 2000000

_CROSS = ndimage.generate_binary_structure(2, 1)
# 4-connectivity inside each node's plane, no links between nodes
_PLANAR_CROSS = np.zeros((3, 3, 3), dtype=bool)
_PLANAR_CROSS[1] = _CROSS


### Per-node stages ###

def stage1_competition(ps):
    """
    Adaptive competition among PS activities.

    Input:
        ps: 1-D array of PS activities of one node

    Return:
        indices of the winners (empty if no entry is positive)
    """
    ps = np.asarray(ps, dtype=np.float64).ravel()
    positive = ps > 0
    if not positive.any():
        return np.zeros(0, dtype=int)
    mean = ps[positive].mean()
    # positive entries at or above their mean win; the maximum always does
    return np.flatnonzero(positive & ((ps >= mean) | (ps == ps.max())))


def component_score(size, total, n_winners, winner_sum, alpha_td):
    """alpha_td * |G|/|W| + (1 - alpha_td) * sum(G)/sum(W)."""
    return alpha_td * size / n_winners + (1 - alpha_td) * total / winner_sum


def stage2_group_select_conv(coords, ps, alpha_td=0.2):
    """
    Group winners into 4-connected spatial components and keep the best one.

    Input:
        coords: int array (n, 2) of (y, x) input-plane coordinates of the winners;
            winners of different channels may share a coordinate
        ps: PS activities of the winners, shape (n,)
        alpha_td: fusion factor between component size and activity share

    Return:
        indices (into the winner list) of the selected component. Ties go to the
        larger activity sum, then to the component holding the smallest (y, x).
    """
    coords = np.asarray(coords, dtype=int).reshape(-1, 2)
    ps = np.asarray(ps, dtype=np.float64).ravel()
    if len(ps) == 0:
        return np.zeros(0, dtype=int)
    local = coords - coords.min(axis=0)
    grid = np.zeros(tuple(local.max(axis=0) + 1), dtype=bool)
    grid[local[:, 0], local[:, 1]] = True
    labels, n_comp = ndimage.label(grid, structure=_CROSS)
    entry = labels[local[:, 0], local[:, 1]]
    sizes = np.bincount(entry, minlength=n_comp + 1)[1:]
    sums = np.bincount(entry, weights=ps, minlength=n_comp + 1)[1:]
    scores = component_score(sizes, sums, len(ps), ps.sum(), alpha_td)
    comps = np.arange(1, n_comp + 1)
    # label numbering follows raster order, so the smallest label holds the smallest coordinate
    best = comps[np.lexsort((comps, -sums, -scores))[0]]
    return np.flatnonzero(entry == best)


def stage2_wta_collapsed(winners, ps):
    """
    Winner-take-all for collapsed (1x1) convolutions.

    Input:
        winners: indices (channels) of the stage-1 winners
        ps: PS activities of all channels

    Return:
        array holding the single maximum-PS winner (ties -> lowest channel)
    """
    winners = np.asarray(winners, dtype=int)
    if len(winners) == 0:
        return winners
    ps = np.asarray(ps, dtype=np.float64).ravel()
    order = np.lexsort((winners, -ps[winners]))
    return winners[order[:1]]


def stage3_normalize_propagate(selected, ps, parent_gate, g_below, contributors):
    """
    Split a parent gate over the selected contributors and accumulate it.

    Input:
        selected: indices into ps of the selected contributors
        ps: PS activities of the node
        parent_gate: gate value of the node (> 0)
        g_below: array receiving the contributions (modified in place)
        contributors: tuple of index arrays into g_below, one entry per PS value

    Return:
        contributions parent_gate * q_k of the selected contributors
    """
    selected = np.asarray(selected, dtype=int)
    if len(selected) == 0:
        return np.zeros(0)
    ps = np.asarray(ps, dtype=np.float64).ravel()
    q = ps[selected] / ps[selected].sum()
    contrib = parent_gate * q
    np.add.at(g_below, tuple(np.asarray(c)[selected] for c in contributors), contrib)
    return contrib


### Vectorised layer pass ###

def gather_ps(layer, nodes, h_below, kernel):
    """
    PS fields of a set of output nodes of a convolution.

    Input:
        nodes: int array (M, 4) of (n, c_out, y, x)

    Return:
        ps: PS activities (M, C_in, kh, kw); positions in the padding are 0
        ys, xs: input-plane rows (M, kh) and columns (M, kw) of each tap
    """
    _, c_in, kh, kw = kernel.shape
    p = layer.p
    hp = np.pad(h_below, [(0, 0), (0, 0), (p, p), (p, p)], mode='constant')
    ys = nodes[:, 2, None] * layer.s + np.arange(kh)[None] * layer.d
    xs = nodes[:, 3, None] * layer.s + np.arange(kw)[None] * layer.d
    patch = hp[nodes[:, 0, None, None, None], np.arange(c_in)[None, :, None, None],
               ys[:, None, :, None], xs[:, None, None, :]]
    ps = patch * kernel[nodes[:, 1]]
    return ps, ys - p, xs - p


@dataclass
class PSField:
    """
    PS activities of one gated node over the valid part of its receptive field.

    contributors holds (n, c_in, y, x) index arrays into the layer input, one
    entry per PS value.
    """
    ps: np.ndarray
    channels: np.ndarray
    coords: np.ndarray
    contributors: tuple


def ps_field(layer, node, h_below, kernel):
    """PSField of output node (n, c_out, y, x) of a convolution."""
    h_below = h_below if isinstance(h_below, np.ndarray) else getattr(h_below, 'data', h_below)
    kernel = kernel if isinstance(kernel, np.ndarray) else getattr(kernel, 'data', kernel)
    nodes = np.asarray(node, dtype=int).reshape(1, 4)
    ps, ys, xs = gather_ps(layer, nodes, h_below, kernel)
    c_in, kh, kw = ps.shape[1:]
    cc, ky, kx = np.meshgrid(np.arange(c_in), np.arange(kh), np.arange(kw), indexing='ij')
    cc, yy, xx = cc.ravel(), ys[0][ky.ravel()], xs[0][kx.ravel()]
    valid = (yy >= 0) & (yy < h_below.shape[2]) & (xx >= 0) & (xx < h_below.shape[3])
    cc, yy, xx = cc[valid], yy[valid], xx[valid]
    return PSField(ps=ps.ravel()[valid], channels=cc, coords=np.stack([yy, xx], axis=1),
                   contributors=(np.full(len(cc), nodes[0, 0]), cc, yy, xx))


def _winner_mask(ps):
    flat = ps.reshape(len(ps), -1)
    positive = flat > 0
    count = positive.sum(axis=1)
    mean = np.where(positive, flat, 0.0).sum(axis=1) / np.maximum(count, 1)
    mean[count == 0] = np.inf
    top = flat.max(axis=1, keepdims=True)
    return (positive & ((flat >= mean[:, None]) | (flat == top))).reshape(ps.shape)


def _select_components(winners, ps, dilation, alpha_td):
    """Stage 2 for a chunk of conv nodes; returns the selected mask."""
    m = len(ps)
    _, _, kh, kw = ps.shape
    d = dilation
    occ = np.zeros((m, (kh - 1) * d + 1, (kw - 1) * d + 1), dtype=bool)
    occ[:, ::d, ::d] = winners.any(axis=1)
    labels, n_comp = ndimage.label(occ, structure=_PLANAR_CROSS)
    if n_comp == 0:
        return winners
    entry = np.broadcast_to(labels[:, None, ::d, ::d], ps.shape)
    lab = entry[winners]
    vals = ps[winners]
    sizes = np.bincount(lab, minlength=n_comp + 1)
    sums = np.bincount(lab, weights=vals, minlength=n_comp + 1)
    comp_node = np.zeros(n_comp + 1, dtype=int)
    comp_node[lab] = np.nonzero(winners)[0]
    node_size = winners.reshape(m, -1).sum(axis=1)
    node_sum = np.where(winners, ps, 0.0).reshape(m, -1).sum(axis=1)
    comps = np.arange(1, n_comp + 1)
    cn = comp_node[comps]
    scores = component_score(sizes[comps], sums[comps], node_size[cn], node_sum[cn], alpha_td)
    order = np.lexsort((comps, -sums[comps], -scores, cn))
    _, first = np.unique(cn[order], return_index=True)
    chosen = np.zeros(m, dtype=int)
    chosen[cn[order[first]]] = comps[order[first]]
    return winners & (entry == chosen[:, None, None, None])


def _select_wta(winners, ps):
    m = len(ps)
    flat = np.where(winners, ps, -np.inf).reshape(m, -1)
    best = flat.argmax(axis=1)
    selected = np.zeros_like(flat, dtype=bool)
    selected[np.arange(m), best] = True
    selected &= winners.reshape(m, -1).any(axis=1)[:, None]
    return selected.reshape(ps.shape)


def _td_conv(layer, g_above, h_below, kernel, alpha_td):
    g_below = np.zeros_like(h_below)
    chunk = max(1, _CHUNK_ENTRIES // int(np.prod(kernel.shape[1:])))
    active = np.argwhere(g_above > 0)
    for start in range(0, len(active), chunk):
        nodes = active[start:start + chunk]
        parent = g_above[tuple(nodes.T)]
        ps, ys, xs = gather_ps(layer, nodes, h_below, kernel)
        winners = _winner_mask(ps)
        if layer.collapsed:
            selected = _select_wta(winners, ps)
        else:
            selected = _select_components(winners, ps, layer.d, alpha_td)
        sel_sum = np.where(selected, ps, 0.0).reshape(len(ps), -1).sum(axis=1)
        m, c, ky, kx = np.nonzero(selected)
        contrib = parent[m] * (ps[m, c, ky, kx] / sel_sum[m])
        np.add.at(g_below, (nodes[m, 0], c, ys[m, ky], xs[m, kx]), contrib)
    return g_below


def td_layer(layer, g_above, h_below, kernel=None, argmax=None, alpha_td=0.2):
    """
    Gating of a layer's input from the gating of its output.

    Input:
        layer: LayerSpec
        g_above: gate array with the layer's output shape
        h_below: the layer's input activity (array or Tensor)
        kernel: weight array (C_out, C_in, kh, kw) for conv layers
        argmax: maxpool argmax indices for pooling layers
        alpha_td: stage-2 fusion factor

    Return:
        g_below: gate array with the shape of h_below
    """
    h_below = h_below if isinstance(h_below, np.ndarray) else getattr(h_below, 'data', h_below)
    g_above = np.asarray(g_above, dtype=np.float64)
    if layer.kind == 'relu':
        return np.where(h_below > 0, g_above, 0.0)
    if layer.kind == 'maxpool':
        if argmax is None:
            raise StateError(f'Pooling layer {layer.name} has no argmax indices')
        n, c, h, w = h_below.shape
        g_below = np.zeros((n, c, h * w))
        nn, cc, yy, xx = np.nonzero(g_above > 0)
        np.add.at(g_below, (nn, cc, argmax[nn, cc, yy, xx]), g_above[nn, cc, yy, xx])
        return g_below.reshape(h_below.shape)
    if kernel is None:
        raise StateError(f'Convolution {layer.name} needs its kernel for the TD pass')
    kernel = kernel if isinstance(kernel, np.ndarray) else getattr(kernel, 'data', kernel)
    return _td_conv(layer, g_above, h_below, kernel, alpha_td)


class GatingTrace:
    """
    Gating arrays g_i, one per BU layer (same shape as h_i) and per LSD layer.

    BU layers outside [stop, LSD tap] hold zeros.
    """
    def __init__(self, gates, lsd_gates, alpha_td=0.2):
        self.gates = gates
        self.lsd = lsd_gates
        self.alpha_td = alpha_td

    def __getitem__(self, name):
        return self.gates[name]

    def levels(self, spec):
        return [self.gates[level.tap] for level in spec.levels]

    def total(self):
        return sum(float(g.sum()) for g in self.gates.values())


def seed_gates(signal, scores):
    """Gate value 1 at the prediction output of every active (unit, class)."""
    seeds = [np.zeros(m.shape) for m in scores.maps]
    for n, unit, cls in signal.active:
        group, y, x = scores.unit_position(unit)
        seeds[group][n, cls, y, x] += 1.0
    return seeds


def td_pass(signal, trace, scores, spec, weights, alpha_td=0.2):
    """
    Full top-down pass from the attention signal down to the stop layer.

    Input:
        signal: AttentionSignal (N, A, K)
        trace: ActivationTrace of the BU pass
        scores: ScoreMaps of the LSD pass (with its LsdTrace)
        spec: NetworkSpec
        weights: parameter dict
        alpha_td: stage-2 fusion factor

    Return:
        GatingTrace
    """
    lsd_trace = scores.trace
    gates = {name: np.zeros(h.shape) for name, h in trace.h.items()}
    lsd_gates = {name: np.zeros(h.shape) for name, h in lsd_trace.h.items() if name != lsd_trace.tap}
    lsd_gates[lsd_trace.tap] = gates[spec.lsd_tap]
    for group, seed in zip(spec.lsd.groups, seed_gates(signal, scores)):
        lsd_gates[f'g{group.index}.pred'] += seed
    for node in reversed(lsd_trace.nodes):
        g_above = lsd_gates[node.name]
        if not g_above.any():
            continue
        kernel = weights[f'lsd.{node.name}.weight'] if node.layer.parametric else None
        lsd_gates[node.source] += td_layer(node.layer, g_above, lsd_trace.h[node.source], kernel,
                                           lsd_trace.argmax.get(node.name), alpha_td)
    stop = spec.index(spec.stop)
    for i in range(spec.index(spec.lsd_tap), stop, -1):
        layer = spec.layers[i]
        g_above = gates[layer.name]
        if not g_above.any():
            continue
        kernel = weights[f'bu.{layer.name}.weight'] if layer.parametric else None
        argmax = trace.pool_indices(layer.name) if layer.kind == 'maxpool' else None
        gates[spec.layers[i - 1].name] += td_layer(layer, g_above, trace.below(layer.name), kernel,
                                                   argmax, alpha_td)
    return GatingTrace(gates, lsd_gates, alpha_td)
