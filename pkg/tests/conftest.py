import numpy as np
import pytest
from hypothesis import settings

from blockrmt.model import LambdaSpectrum, lambda_spectrum

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sp_zero():
    return LambdaSpectrum.zero(50, 2)


@pytest.fixture(scope="session")
def sp_d2():
    """A = 0.1 I, D = 2."""
    return lambda_spectrum(0.1 * np.eye(6, dtype=complex), 2)


@pytest.fixture(scope="session")
def sp_flow():
    """A = 0.05 I, D = 2."""
    return lambda_spectrum(0.05 * np.eye(4, dtype=complex), 2)


def random_coupling(rng, N, scale=0.5):
    return scale * (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(2 * N)
