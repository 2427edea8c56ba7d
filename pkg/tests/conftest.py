import numpy as np
import pytest

from fedcanon.aggregation import ClientUpdate
from fedcanon.params import ProjectorParams


def random_params(rng, dims=(16, 12, 8), activation="identity", scale=1.0):
    p = ProjectorParams.init(list(dims), rng, activation, scale)
    for layer in p.layers:
        layer.bias = rng.standard_normal(layer.bias.shape) * 0.1
    return p


def perturbed_updates(rng, base, k=5, noise=0.1, counts=None):
    counts = counts or [100] * k
    out = []
    for i in range(k):
        p = base.map(lambda a: a + noise * rng.standard_normal(a.shape))
        out.append(ClientUpdate(i, p, float(rng.uniform(0, 2)), counts[i]))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
