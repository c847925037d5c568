import numpy as np
import pytest

from pm_viab.drift import build_drift, build_group
from pm_viab.dynamics import System
from pm_viab.model import ControlSet, ModelSpec, make_beta, make_coupling
from pm_viab.spatial import GridDomain


@pytest.fixture(scope="session")
def grid7():
    return GridDomain(7)


@pytest.fixture(scope="session")
def grid15():
    return GridDomain(15)


@pytest.fixture(scope="session")
def group7(grid7):
    return build_group(grid7, build_drift(grid7, "cellular"))


@pytest.fixture(scope="session")
def group15(grid15):
    return build_group(grid15, build_drift(grid15, "cellular"))


@pytest.fixture(scope="session")
def still7(grid7):
    return build_group(grid7, build_drift(grid7, "zero"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_model(grid, *, c=1.0, f1="zero", f1_params=None, controls=((0.0,),), a=1.0):
    """beta_1 = a r, scalar second component y' = -c y."""
    U = ControlSet(list(controls))
    return ModelSpec(
        make_beta("linear", {"a": a}),
        make_beta("zero", may_be_zero=True),
        make_coupling(f1, f1_params or {}, U, grid, None, 1),
        make_coupling("decay", {"c": c}, U, grid, None, 2),
        U,
    )


@pytest.fixture
def scalar_system7(grid7, group7):
    return System(grid7, group7)
