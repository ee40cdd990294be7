import numpy as np
import pytest
from jump_fbsde.condexp import BasisSpec
from jump_fbsde.forward import build_ensemble, simulate_bundle
from jump_fbsde.model import Constants, JumpModel, ProblemSpec
from jump_fbsde.timegrid import build_uniform


def constant(value):
    return lambda t, x: np.full(np.shape(x), value)


def make_spec(g=None, f=None, beta=0.5, K=None, name="test"):
    """Driftless unit-volatility spec; payoff and generator default to zero."""
    return ProblemSpec(
        b=constant(0.0),
        sigma=constant(1.0),
        beta=constant(beta),
        g=g if g is not None else (lambda x: np.zeros(np.shape(x))),
        f=f if f is not None else (lambda t, x, y, z, u: np.zeros(np.shape(y))),
        x0=0.0,
        T=1.0,
        constants=Constants(K=K),
        name=name,
    )


@pytest.fixture
def grid():
    return build_uniform(1.0, 8)


@pytest.fixture
def jump():
    return JumpModel.constant(1.0, 1.0)


@pytest.fixture
def bundle(grid, jump):
    return simulate_bundle(grid, jump, 2000, seed=7)


@pytest.fixture
def basis():
    return BasisSpec(degree=2)


@pytest.fixture
def zero_spec():
    return make_spec()


@pytest.fixture
def linear_spec():
    """g(x) = x, f = 0, beta = 0.5."""
    return make_spec(g=lambda x: np.asarray(x, dtype=float))


@pytest.fixture
def linear_ensemble(linear_spec, grid, bundle):
    return build_ensemble(linear_spec, grid, bundle)


@pytest.fixture
def spec_factory():
    return make_spec
