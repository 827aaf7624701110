import numpy as np
import pytest

from fracsve.kernel import KernelParams


@pytest.fixture(scope="session")
def h_grid():
    return (0.05, 0.1, 0.25, 0.4, 0.5)


@pytest.fixture
def p_quarter():
    return KernelParams(H=0.25)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=20240))
