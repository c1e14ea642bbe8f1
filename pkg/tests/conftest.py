import numpy as np
import pytest

from metamob.core import IpdDataset


def make_dataset(rng, n=120, K=3, p=3, effect=0.0, b0_sd=0.0, b1_sd=0.0, names=None):
    """Small random dataset; ``effect`` adds a treatment interaction on X1 > 0."""
    trial = np.resize(np.arange(1, K + 1), n)
    trt = rng.integers(0, 2, n)
    trt[:2] = (0, 1)
    X = rng.normal(size=(n, p))
    b0 = rng.normal(0, b0_sd, K) if b0_sd else np.zeros(K)
    b1 = rng.normal(0, b1_sd, K) if b1_sd else np.zeros(K)
    y = (1.0 + effect * trt * (X[:, 0] > 0) + b0[trial - 1] + b1[trial - 1] * trt
         + rng.normal(size=n))
    return IpdDataset(y, trt, trial, X, names or ())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
