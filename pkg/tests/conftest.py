import numpy as np
import pytest

from gmmflow import ProblemSpec, gauss_hermite_rule, gaussian_stream


@pytest.fixture(scope="session")
def rule():
    return gauss_hermite_rule(301)


@pytest.fixture(scope="session")
def rule512():
    return gauss_hermite_rule(512)


@pytest.fixture
def spec2():
    return ProblemSpec(R=2.0, w_star=2.0 / 3.0, d=10)


def random_realizable_state(seed: int, d: int = 8):
    """Summary statistics of three random unit vectors: always a valid
    (PSD) overlap configuration."""
    rng = gaussian_stream(seed, 0)
    raw = rng.standard_normal((2, d))
    mus = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    e1 = np.zeros(d)
    e1[0] = 1.0
    return float(mus[0] @ e1), float(mus[1] @ e1), float(mus[0] @ mus[1])
