import numpy as np
import pytest

from qbsdelab import BSDESpec, BilinearDriver, Grids


@pytest.fixture(scope="session")
def grids():
    """Default accuracy-padded grids on [0, 1]."""
    return Grids.wide(1.0, nt=200, nx=401)


@pytest.fixture(scope="session")
def coarse():
    """Faster grids for tests that do several solves."""
    return Grids.wide(1.0, nt=80, nx=221)


@pytest.fixture(scope="session")
def half_driver():
    """Scalar purely quadratic driver f~(u, v) = u v / 2 (Theta = 1/2)."""
    return BilinearDriver(np.array([[[0.5]]]))


@pytest.fixture(scope="session")
def gaussian_spec(grids, half_driver):
    """Terminal B_T with the scalar quadratic driver: Cole-Hopf closed form."""
    return BSDESpec(n=1, driver=half_driver, terminal=lambda x: x, grids=grids)


@pytest.fixture(scope="session")
def square_spec(grids, half_driver):
    """Terminal B_T^2 with the scalar quadratic driver: chi-square Cole-Hopf."""
    return BSDESpec(n=1, driver=half_driver, terminal=lambda x: x**2, grids=grids)
