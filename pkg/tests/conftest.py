from pathlib import Path

import numpy as np
import pytest

from erpcal.mesh import solve_eigenbasis
from erpcal.shapes import icosphere, rectangle
from erpcal.surrogate import SurrogateModel

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def sphere():
    return icosphere(3, radius=20.0)


@pytest.fixture(scope="session")
def sphere_basis(sphere):
    return solve_eigenbasis(sphere, 40)


@pytest.fixture(scope="session")
def sheet():
    # 30 x 20 mm open sheet, 1 mm spacing
    return rectangle(30.0, 20.0, 31, 21)


@pytest.fixture(scope="session")
def sheet_basis(sheet):
    return solve_eigenbasis(sheet, 32)


@pytest.fixture(scope="session")
def surrogate():
    """Cubic surrogates fitted to a 100-point strip-simulation design (seed 0)."""
    return SurrogateModel.load(DATA / "surrogate_lhs100.txt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
