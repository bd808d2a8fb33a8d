"""
Network architecture description: layer inventory, tap points, LSD groups and
decoder levels, plus receptive-field geometry.

Architecture files are line oriented, one directive per line:

    input channels=3
    conv name=conv1 out=16 k=3 s=1 p=1 d=1
    relu name=relu1
    maxpool name=pool1 k=2 s=2
    collapsed name=fc6 out=64
    tap lsd relu3
    stop relu1
    lsd design=parallel channels=16
    group 1 c3x3-s2-p2-d2 c1x1 c3x3-p1
    level 1 tap=relu3 b=32 r=32 q=24

Leading '#' lines form a header. format_network(parse_network(text)) returns
text unchanged for files written in this canonical order.
"""

import os
import re
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import RejectedInputError

LAYER_KINDS = ('conv', 'collapsed', 'relu', 'maxpool')
LSD_DESIGNS = ('parallel', 'sequential')

_settings_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'settings')


@dataclass
class LayerSpec:
    """One layer: kind in {conv, collapsed, relu, maxpool} with its hyperparameters."""
    kind: str
    name: str
    out: Optional[int] = None
    k: int = 1
    s: int = 1
    p: int = 0
    d: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise RejectedInputError(f'Unknown layer kind {self.kind}')
        if self.kind == 'collapsed' and (self.k != 1 or self.p != 0 or self.d != 1):
            raise RejectedInputError(f'Collapsed convolution {self.name} must have a 1x1 kernel')
        if self.k < 1 or self.s < 1 or self.p < 0 or self.d < 1:
            raise RejectedInputError(f'Invalid hyperparameters for layer {self.name}')
        if self.kind in ('conv', 'collapsed') and (self.out is None or self.out < 1):
            raise RejectedInputError(f'Layer {self.name} needs a positive out channel count')

    @property
    def parametric(self):
        return self.kind in ('conv', 'collapsed')

    @property
    def collapsed(self):
        """1x1 convolutions act as positionwise fully-connected layers."""
        return self.parametric and self.k == 1

    def output_extent(self, size):
        if self.kind == 'relu':
            return size
        if self.kind == 'maxpool':
            return (size - self.k) // self.s + 1 if size >= self.k else 0
        return (size + 2 * self.p - self.d * (self.k - 1) - 1) // self.s + 1

    def format(self):
        if self.kind == 'conv':
            return f'conv name={self.name} out={self.out} k={self.k} s={self.s} p={self.p} d={self.d}'
        if self.kind == 'collapsed':
            return f'collapsed name={self.name} out={self.out}'
        if self.kind == 'maxpool':
            return f'maxpool name={self.name} k={self.k} s={self.s}'
        return f'relu name={self.name}'


@dataclass
class LsdGroupSpec:
    """
    One LSD group: intermediate layers l_i (each conv followed by a ReLU) and a
    collapsed prediction layer c_i with K output channels.
    """
    index: int
    tokens: List[str]
    layers: List[LayerSpec]

    def prediction(self, n_classes):
        return LayerSpec('collapsed', f'g{self.index}.pred', out=n_classes)


@dataclass
class LsdSpec:
    design: str = 'parallel'
    channels: int = 16
    groups: List[LsdGroupSpec] = field(default_factory=list)


@dataclass
class SegLevelSpec:
    """Decoder level i: BU tap name and output channels of b (b^BU and b^TD), r and q."""
    index: int
    tap: str
    b: int
    r: int
    q: int

    def __post_init__(self):
        if min(self.b, self.r, self.q) < 1:
            raise RejectedInputError(f'Decoder level {self.index} needs positive channel sizes')


@dataclass
class NetworkSpec:
    """Ordered BU layers plus tap points, stop layer, LSD groups and decoder levels."""
    layers: List[LayerSpec]
    lsd_tap: str
    stop: str
    lsd: LsdSpec
    levels: List[SegLevelSpec] = field(default_factory=list)
    input_channels: int = 3
    header: List[str] = field(default_factory=list)

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise RejectedInputError('Layer names must be unique')
        for tap in [self.lsd_tap, self.stop] + [level.tap for level in self.levels]:
            if tap not in names:
                raise RejectedInputError(f'Tap {tap} does not name a layer')
        if self.index(self.stop) >= self.index(self.lsd_tap):
            raise RejectedInputError('Stop layer must precede the LSD tap')
        for level in self.levels:
            if not self.index(self.stop) <= self.index(level.tap) <= self.index(self.lsd_tap):
                raise RejectedInputError(f'Level {level.index} tap {level.tap} lies outside the TD range')

    def index(self, name):
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise RejectedInputError(f'Unknown layer {name}')

    def layer(self, name):
        return self.layers[self.index(name)]

    def shapes(self, height, width):
        """
        Output shape (C, H, W) of every BU layer for an input of the given extent.

        Return:
            dict layer name -> (C, H, W)
        """
        c, h, w = self.input_channels, height, width
        shapes = {}
        for layer in self.layers:
            h, w = layer.output_extent(h), layer.output_extent(w)
            if h < 1 or w < 1:
                raise RejectedInputError(f'Input extent {height}x{width} too small at layer {layer.name}')
            if layer.parametric:
                c = layer.out
            shapes[layer.name] = (c, h, w)
        return shapes

    def channels_out(self, name):
        """Output channel count of a BU layer."""
        layer = self.layer(name)
        return layer.out if layer.parametric else self.channels_in(name)

    def channels_in(self, name):
        """Input channel count of a BU layer."""
        i = self.index(name)
        c = self.input_channels
        for layer in self.layers[:i]:
            if layer.parametric:
                c = layer.out
        return c


### Receptive field geometry ###

@dataclass(frozen=True)
class RFGeometry:
    """
    Input-space footprint of a unit: size (extent), jump (input pixels per
    output step) and offset (centre of output unit 0, in input pixel coordinates
    where pixel i covers [i, i+1)).
    """
    size: float = 1
    jump: float = 1
    offset: float = 0.5

    def center(self, index):
        return self.offset + index * self.jump


def rf_step(geo, layer):
    """Apply one layer to a receptive-field geometry."""
    if layer.kind == 'relu':
        return geo
    k_eff = layer.d * (layer.k - 1) + 1
    pad = layer.p if layer.parametric else 0
    return RFGeometry(size=geo.size + (k_eff - 1) * geo.jump,
                      jump=geo.jump * layer.s,
                      offset=geo.offset + ((k_eff - 1) / 2 - pad) * geo.jump)


def compose_rf(layers, start=None):
    geo = start if start is not None else RFGeometry()
    for layer in layers:
        geo = rf_step(geo, layer)
    return geo


def receptive_field(spec, layer_name='input'):
    """
    Receptive field of one output unit of a BU layer, in input pixels.

    Input:
        spec: NetworkSpec
        layer_name: layer name, or 'input' for the identity geometry

    Return:
        RFGeometry
    """
    if layer_name == 'input':
        return RFGeometry()
    i = spec.index(layer_name)
    return compose_rf(spec.layers[:i + 1])


### Parsing ###

_token_re = re.compile(r'^([cm])(\d+)x(\d+)((?:-[spd]\d+)*)$')


def parse_group_token(token, name, channels):
    """
    Parse compact LSD notation such as 'c3x3-s2-p2-d2' or 'm3x3-s2'.

    Defaults s1, p0, d1 may be omitted. A 'c1x1' token becomes a collapsed convolution.
    """
    match = _token_re.match(token)
    if match is None:
        raise RejectedInputError(f'Cannot parse LSD layer token {token}')
    kind, kh, kw, rest = match.groups()
    if kh != kw:
        raise RejectedInputError(f'Only square kernels are supported: {token}')
    opts = {'s': 1, 'p': 0, 'd': 1}
    for part in filter(None, rest.split('-')):
        opts[part[0]] = int(part[1:])
    k = int(kh)
    if kind == 'm':
        if opts['p'] != 0 or opts['d'] != 1:
            raise RejectedInputError(f'Pooling tokens take no padding or dilation: {token}')
        return LayerSpec('maxpool', name, k=k, s=opts['s'])
    if k == 1 and opts['s'] == 1 and opts['p'] == 0 and opts['d'] == 1:
        return LayerSpec('collapsed', name, out=channels)
    return LayerSpec('conv', name, out=channels, k=k, s=opts['s'], p=opts['p'], d=opts['d'])


def build_group(index, tokens, channels):
    layers = []
    for j, token in enumerate(tokens):
        layer = parse_group_token(token, f'g{index}.l{j}', channels)
        layers.append(layer)
        if layer.parametric:
            layers.append(LayerSpec('relu', f'g{index}.l{j}.relu'))
    return LsdGroupSpec(index=index, tokens=list(tokens), layers=layers)


def _keyvals(tokens, lineno):
    opts = {}
    for token in tokens:
        if '=' not in token:
            raise RejectedInputError(f'line {lineno}: expected key=value, got {token}')
        key, value = token.split('=', 1)
        opts[key] = value
    return opts


def parse_network(text):
    """
    Parse an architecture description.

    Return:
        NetworkSpec
    """
    header, layers, levels = [], [], []
    lsd_tap = stop = None
    input_channels = 3
    lsd_opts = {}
    group_lines = []
    body_started = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith('#'):
            if not body_started:
                header.append(raw)
            continue
        body_started = True
        parts = line.split()
        head, rest = parts[0], parts[1:]
        if head == 'input':
            input_channels = int(_keyvals(rest, lineno)['channels'])
        elif head in LAYER_KINDS:
            opts = _keyvals(rest, lineno)
            if 'name' not in opts:
                raise RejectedInputError(f'line {lineno}: layer needs a name')
            kwargs = {key: int(opts[key]) for key in ('out', 'k', 's', 'p', 'd') if key in opts}
            layers.append(LayerSpec(head, opts['name'], **kwargs))
        elif head == 'tap':
            if len(rest) != 2 or rest[0] != 'lsd':
                raise RejectedInputError(f'line {lineno}: expected "tap lsd <layer>"')
            lsd_tap = rest[1]
        elif head == 'stop':
            stop = rest[0]
        elif head == 'lsd':
            lsd_opts = _keyvals(rest, lineno)
        elif head == 'group':
            group_lines.append((int(rest[0]), rest[1:]))
        elif head == 'level':
            opts = _keyvals(rest[1:], lineno)
            levels.append(SegLevelSpec(index=int(rest[0]), tap=opts['tap'],
                                       b=int(opts['b']), r=int(opts['r']), q=int(opts['q'])))
        else:
            raise RejectedInputError(f'line {lineno}: unknown directive {head}')
    if lsd_tap is None or stop is None:
        raise RejectedInputError('Architecture needs "tap lsd" and "stop" directives')
    design = lsd_opts.get('design', 'parallel')
    if design not in LSD_DESIGNS:
        raise RejectedInputError(f'Unknown LSD design {design}')
    channels = int(lsd_opts.get('channels', 16))
    groups = [build_group(i, tokens, channels) for i, tokens in sorted(group_lines)]
    if [g.index for g in groups] != list(range(len(groups))):
        raise RejectedInputError('LSD groups must be numbered 0..C-1')
    if [level.index for level in levels] != list(range(1, len(levels) + 1)):
        raise RejectedInputError('Decoder levels must be numbered 1..M')
    return NetworkSpec(layers=layers, lsd_tap=lsd_tap, stop=stop,
                       lsd=LsdSpec(design=design, channels=channels, groups=groups),
                       levels=levels, input_channels=input_channels, header=header)


def format_network(spec):
    """Canonical text of a NetworkSpec (inverse of parse_network)."""
    lines = list(spec.header)
    lines.append(f'input channels={spec.input_channels}')
    lines += [layer.format() for layer in spec.layers]
    lines.append(f'tap lsd {spec.lsd_tap}')
    lines.append(f'stop {spec.stop}')
    lines.append(f'lsd design={spec.lsd.design} channels={spec.lsd.channels}')
    for group in spec.lsd.groups:
        lines.append(' '.join(['group', str(group.index)] + group.tokens))
    for level in spec.levels:
        lines.append(f'level {level.index} tap={level.tap} b={level.b} r={level.r} q={level.q}')
    return '\n'.join(lines) + '\n'


def load_network(fname):
    """
    Load an architecture file. Bare names ('desk', 'alexnet', 'vgg16') refer to
    the files shipped in selseg/settings.
    """
    if not os.path.isfile(fname):
        shipped = os.path.join(_settings_dir, f'arch_{fname}.txt')
        if os.path.isfile(shipped):
            fname = shipped
        else:
            raise RejectedInputError(f'Architecture file {fname} not found')
    with open(fname, 'r') as f:
        return parse_network(f.read())


def with_design(spec, design):
    """Copy of spec with another LSD design."""
    if design not in LSD_DESIGNS:
        raise RejectedInputError(f'Unknown LSD design {design}')
    lsd = LsdSpec(design=design, channels=spec.lsd.channels, groups=spec.lsd.groups)
    return NetworkSpec(layers=spec.layers, lsd_tap=spec.lsd_tap, stop=spec.stop, lsd=lsd,
                       levels=spec.levels, input_channels=spec.input_channels, header=spec.header)
