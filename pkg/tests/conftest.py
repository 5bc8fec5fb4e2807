import numpy as np
import pytest


def separated_blobs(rng, k, m, d=2, sep=6.0, noise=1.0):
    """``k`` balanced Gaussian blobs of ``m`` points, centres >= ``sep`` apart."""
    while True:
        centres = rng.uniform(-1, 1, (k, d)) * sep * np.sqrt(k)
        dist = np.linalg.norm(centres[:, None] - centres[None], axis=2)
        if k == 1 or dist[np.triu_indices(k, 1)].min() >= sep:
            break
    labels = np.repeat(np.arange(k), m)
    return centres[labels] + rng.normal(0, noise, (k * m, d)), labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
