import numpy as np
import pytest

from volterralift import CoefficientSet, LevyModel, make_atomic


@pytest.fixture
def two_atom():
    """k(t) = 2 exp(-t) + 3 exp(-2t)."""
    return make_atomic([(1.0, 2.0), (2.0, 3.0)])


@pytest.fixture
def sign_marks():
    return LevyModel(np.array([[1.0], [-1.0]]), np.array([1.0, 1.0]))


@pytest.fixture
def damped_coeffs():
    return CoefficientSet(lambda t, u: -0.5 * u, lambda t, xi, u: np.broadcast_to(0.1 * xi, u.shape), 0.5, 0.0)


def zero_coeffs() -> CoefficientSet:
    return CoefficientSet(lambda t, u: np.zeros_like(u), lambda t, xi, u: np.zeros_like(u), 0.0, 0.0)
