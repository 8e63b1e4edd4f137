import numpy as np
import pytest

from fraclab.model import make_cubic_nonlinearity
from fraclab.solver import solve_layer


@pytest.fixture(scope="session")
def cubic():
    return make_cubic_nonlinearity()


@pytest.fixture(scope="session")
def layer05(cubic):
    return solve_layer(cubic, 0.5, 40.0, 801)


@pytest.fixture(scope="session")
def layer025(cubic):
    return solve_layer(cubic, 0.25, 40.0, 801)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
