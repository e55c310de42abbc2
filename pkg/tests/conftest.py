import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hessfine.net import LossSpec, Network

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACTS = ("tanh", "sigmoid", "gelu", "softplus")


def random_net(rng, dims, acts="tanh", loss="ce", scale=1.0):
    net = Network.random(dims, acts, LossSpec(loss), rng=rng)
    if scale != 1.0:
        net = net.with_weights([scale * w for w in net.weights])
    return net


def random_instance(seed, loss=None, max_width=4, max_layers=3):
    """A seeded (net, x, y) triple with random depth, widths, activations and loss."""
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, max_layers + 1))
    dims = [int(d) for d in rng.integers(1, max_width + 1, size=L)] + [int(rng.integers(2, max_width + 1))]
    hidden = [ACTS[int(rng.integers(len(ACTS)))] for _ in range(L - 1)]
    out = ["identity", "tanh"][int(rng.integers(2))]
    loss = loss or ["ce", "sqerr_prob"][int(rng.integers(2))]
    net = Network.random(dims, hidden + [out], LossSpec(loss), rng=rng)
    x = rng.normal(size=dims[0])
    y = int(rng.integers(dims[-1]))
    return net, x, y


def fd_gradient(f, W, h=1e-5):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        e = np.zeros_like(W)
        e[idx] = h
        g[idx] = (f(W + e) - f(W - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
