# Test functions for architecture parsing, layer shapes and receptive fields

import os
import numpy as np
import pytest

from selseg.architecture import (LayerSpec, RFGeometry, compose_rf, receptive_field, parse_group_token,
                                 parse_network, format_network, load_network, with_design, LSD_DESIGNS)
from selseg.errors import RejectedInputError
from selseg.tensor import Tensor, conv2d, maxpool2d

_settings_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'settings')


@pytest.mark.parametrize('name', ['desk', 'alexnet', 'vgg16'])
def test_shipped_architectures_round_trip(name):
    with open(os.path.join(_settings_dir, f'arch_{name}.txt')) as f:
        text = f.read()
    assert format_network(parse_network(text)) == text


@pytest.mark.parametrize('name, size, shape', [
    ('desk', 64, (48, 16, 16)),
    ('alexnet', 320, (256, 20, 20)),
    ('vgg16', 320, (512, 20, 20)),
])
def test_lsd_tap_shape(name, size, shape):
    spec = load_network(name)
    assert spec.shapes(size, size)[spec.lsd_tap] == shape


def test_shapes_reject_small_input(desk_spec):
    with pytest.raises(RejectedInputError):
        desk_spec.shapes(2, 2)


def test_channels(tiny_spec):
    assert tiny_spec.channels_in('conv1') == 3
    assert tiny_spec.channels_out('pool1') == 4
    assert tiny_spec.channels_in('conv2') == 4
    assert tiny_spec.channels_out('relu2') == 6


def test_with_design(desk_spec):
    seq = with_design(desk_spec, 'sequential')
    assert seq.lsd.design == 'sequential'
    assert seq.lsd.groups == desk_spec.lsd.groups
    with pytest.raises(RejectedInputError):
        with_design(desk_spec, 'cascade')
    assert LSD_DESIGNS == ('parallel', 'sequential')


def test_load_network_missing():
    with pytest.raises(RejectedInputError):
        load_network('no_such_architecture')


@pytest.mark.parametrize('text', [
    'input channels=3\nconv name=c1 out=4 k=3\nrelu name=r1\nstop c1\n',
    'input channels=3\nconv name=c1 out=4 k=3\nrelu name=r1\ntap lsd c1\nstop r1\n',
    'input channels=3\nconv name=c1 out=4 k=3\nconv name=c1 out=4 k=3\ntap lsd c1\nstop c1\n',
    'input channels=3\nconv name=c1 out=4 k=3\nrelu name=r1\ntap lsd r1\nstop c1\nlsd design=cascade\n',
    'input channels=3\nconv name=c1 out=4 k=3\nrelu name=r1\ntap lsd r1\nstop c1\nblur name=b1\n',
    'input channels=3\nconv name=c1 out=4 k=3\nrelu name=r1\ntap lsd r1\nstop c1\ngroup 1 c1x1\n',
])
def test_parse_network_rejects(text):
    with pytest.raises(RejectedInputError):
        parse_network(text)


def test_layer_spec_validation():
    with pytest.raises(RejectedInputError):
        LayerSpec('collapsed', 'fc', out=4, k=3)
    with pytest.raises(RejectedInputError):
        LayerSpec('conv', 'c', out=0)
    with pytest.raises(RejectedInputError):
        LayerSpec('conv', 'c', out=4, s=0)


### Group notation ###

def test_parse_group_tokens_as_written():
    layer = parse_group_token('c3x3-p2-d2', 'l', 256)
    assert (layer.kind, layer.out, layer.k, layer.s, layer.p, layer.d) == ('conv', 256, 3, 1, 2, 2)
    layer = parse_group_token('c1x1', 'l', 256)
    assert layer.kind == 'collapsed' and layer.out == 256
    layer = parse_group_token('c3x3-p1', 'l', 256)
    assert (layer.kind, layer.k, layer.s, layer.p, layer.d) == ('conv', 3, 1, 1, 1)
    layer = parse_group_token('m3x3-s2', 'l', 256)
    assert (layer.kind, layer.k, layer.s) == ('maxpool', 3, 2)
    layer = parse_group_token('c3x3-s2-p2-d2', 'l', 8)
    assert (layer.k, layer.s, layer.p, layer.d) == (3, 2, 2, 2)


@pytest.mark.parametrize('token', ['c3x5', 'x3x3', 'm3x3-p1', 'c3x3-q2', 'c3x3-s'])
def test_parse_group_token_rejects(token):
    with pytest.raises(RejectedInputError):
        parse_group_token(token, 'l', 8)


def test_group_layers_insert_relu(desk_spec):
    kinds = [layer.kind for layer in desk_spec.lsd.groups[1].layers]
    assert kinds == ['conv', 'relu', 'collapsed', 'relu', 'conv', 'relu']


### Receptive fields ###

def test_receptive_field_examples():
    geo = compose_rf([LayerSpec('conv', 'c1', out=1, k=3)])
    assert (geo.size, geo.jump) == (3, 1)
    geo = compose_rf([LayerSpec('conv', 'c1', out=1, k=3), LayerSpec('maxpool', 'p1', k=2, s=2),
                      LayerSpec('conv', 'c2', out=1, k=3)])
    assert (geo.size, geo.jump) == (8, 2)
    geo = compose_rf([])
    assert (geo.size, geo.jump) == (1, 1)
    assert geo == RFGeometry()


def test_receptive_field_of_named_layer(tiny_spec):
    assert receptive_field(tiny_spec, 'input') == RFGeometry()
    geo = receptive_field(tiny_spec, 'relu2')
    # conv3 -> pool2 -> conv3
    assert (geo.size, geo.jump) == (8, 2)
    assert geo.offset == 1.0


def _random_layers(rng):
    layers = []
    for i in range(int(rng.integers(1, 4))):
        if rng.random() < 0.35:
            k = int(rng.integers(2, 4))
            layers.append(LayerSpec('maxpool', f'p{i}', k=k, s=int(rng.integers(1, 3))))
        else:
            k = int(rng.choice([1, 3]))
            d = int(rng.integers(1, 3)) if k > 1 else 1
            p = int(rng.integers(0, (d * (k - 1)) // 2 + 1))
            layers.append(LayerSpec('conv', f'c{i}', out=1, k=k, s=int(rng.integers(1, 3)), p=p, d=d))
    return layers


def _forward_ones(x, layers):
    """Forward through all-ones kernels, which keeps any positive perturbation visible."""
    t = Tensor(x)
    for layer in layers:
        if layer.kind == 'maxpool':
            t, _ = maxpool2d(t, k=layer.k, stride=layer.s)
        else:
            t = conv2d(t, Tensor(np.ones((1, 1, layer.k, layer.k))), stride=layer.s, pad=layer.p,
                       dilation=layer.d)
    return t.data[0, 0]


def _influence_rows(layers, size):
    """For each output row, the input rows whose perturbation changes it."""
    footprint = {}
    for r in range(size):
        x = np.zeros((1, 1, size, size))
        x[0, 0, r, :] = 1.0
        out = _forward_ones(x, layers)
        for oy in np.flatnonzero(out.max(axis=1) > 0):
            footprint.setdefault(int(oy), []).append(r)
    return footprint


@pytest.mark.parametrize('seed', range(20))
def test_receptive_field_matches_perturbation(seed):
    """
    Units whose footprint lies inside the image: bounding box equals
    [offset - size/2, offset + size/2) shifted by jump per unit.
    """
    rng = np.random.default_rng(seed)
    layers = _random_layers(rng)
    size = 48
    geo = compose_rf(layers)
    footprint = _influence_rows(layers, size)
    n_checked = 0
    for oy, rows in footprint.items():
        start = geo.center(oy) - geo.size / 2
        stop = start + geo.size - 1
        if start < 0 or stop > size - 1:
            continue
        assert (min(rows), max(rows)) == (start, stop)
        n_checked += 1
    assert n_checked > 0
