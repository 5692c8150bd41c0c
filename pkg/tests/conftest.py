"""
Pytest configuration and fixtures for all tests.
"""
import numpy as np
import pytest

from src.core.potentials import make_gaussian_potential, make_isotropic_gaussian, make_power_potential
from src.core.rng import RngStream


@pytest.fixture
def rng_factory():
    """
    Build independent, reproducible random streams: rng_factory(stream_id).
    """
    def make(stream_id: int = 0, seed: int = 2019) -> RngStream:
        return RngStream(seed, stream_id)
    return make


@pytest.fixture
def rng():
    return RngStream(2019, 0)


@pytest.fixture
def gaussian_2d():
    """Standard Gaussian on R^2 (exact isotropic flow, closed-form bounce times)."""
    return make_isotropic_gaussian(2)


@pytest.fixture
def gaussian_10d():
    return make_isotropic_gaussian(10)


@pytest.fixture
def anisotropic_gaussian():
    """Gaussian with precision diag(1, 4), so m = 1 and M = 4."""
    return make_gaussian_potential(np.diag([1.0, 4.0]))


@pytest.fixture
def quartic_3d():
    """Product of u1(x) = x^4 / 2 on R^3 (polynomial event-time sampler, leapfrog flow)."""
    return make_power_potential(4, 3)
