import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.special import expit

from flowmoe.data import Cytogram, as_binned

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(rng, T=12, d=1, n_per=15, K=2, spread=3.0):
    """Clustered weighted points with time-varying centers; returns (data, feats)."""
    n_h = 4
    feats = expit(rng.normal(size=(T, n_h)))
    centers = rng.normal(scale=spread, size=(K, d))
    data = []
    for t in range(T):
        z = rng.integers(K, size=n_per)
        pts = centers[z] + 0.3 * feats[t, 0] + rng.normal(scale=0.5, size=(n_per, d))
        data.append(as_binned(Cytogram(t + 1, pts, rng.uniform(0.5, 2.0, n_per))))
    return data, feats


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
