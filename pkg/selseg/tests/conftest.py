# Shared fixtures for selseg tests

import numpy as np
import pytest

from selseg.architecture import parse_network, load_network
from selseg.network import SSN
from selseg.simdata import synth_generate

# Small two-level network for 16x16 inputs, fast enough for training tests
TINY_ARCH = """# tiny test network, 16x16 input -> 6x8x8 at relu2
input channels=3
conv name=conv1 out=4 k=3 s=1 p=1 d=1
relu name=relu1
maxpool name=pool1 k=2 s=2
conv name=conv2 out=6 k=3 s=1 p=1 d=1
relu name=relu2
tap lsd relu2
stop relu1
lsd design=parallel channels=4
group 0 c1x1
group 1 c3x3-s2-p1
level 1 tap=relu2 b=4 r=4 q=4
level 2 tap=relu1 b=4 r=4 q=4
"""


@pytest.fixture
def tiny_spec():
    return parse_network(TINY_ARCH)


@pytest.fixture
def desk_spec():
    return load_network('desk')


@pytest.fixture
def tiny_model(tiny_spec):
    return SSN(tiny_spec, n_classes=4, modulation='mul', seed=3)


@pytest.fixture
def tiny_samples():
    return synth_generate(seed=5, n=8, canvas=16, n_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
