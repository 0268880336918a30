import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fads.netio import LayerSpec, NetworkGraph, make_reference_net


@pytest.fixture(scope="session")
def refnet():
    return make_reference_net(42)


def identity_net(tap_relu=True):
    """1x1 identity conv (+ relu) on single-channel images."""
    layers = [LayerSpec("conv", "conv2d", {"out": 1, "kh": 1, "kw": 1}, ("input",))]
    if tap_relu:
        layers.append(LayerSpec("relu", "relu", {}, ("conv",)))
    graph = NetworkGraph("identity", (1, None, None), tuple(layers))
    weights = {"conv.kernel": np.ones((1, 1, 1, 1), np.float32), "conv.bias": np.zeros(1, np.float32)}
    return graph, weights


@pytest.fixture
def identity():
    return identity_net()
