import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_contraction_matrix(rng, n, cplx=False, shrink=1.01):
    B = rng.standard_normal((n, n))
    if cplx:
        B = B + 1j * rng.standard_normal((n, n))
    return B / (np.linalg.norm(B, 2) * shrink)


def random_vector(rng, n, cplx=False):
    v = rng.standard_normal(n)
    return v + 1j * rng.standard_normal(n) if cplx else v
