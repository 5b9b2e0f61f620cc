import numpy as np
import pytest

from casseg.regions import RegionMap

ACCEPTANCE_LINES = []


def random_field(rng, h, w, m, spread=2.0):
    z = rng.normal(size=(h, w, m)) * spread
    e = np.exp(z - z.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


def random_regions(rng, h, w, n):
    n = min(n, h * w)
    ids = rng.integers(0, n, h * w)
    ids[rng.permutation(h * w)[:n]] = np.arange(n)
    return RegionMap(ids.reshape(h, w))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
