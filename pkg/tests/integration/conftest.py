import logging
import pytest
from jump_fbsde.condexp import BasisSpec
from jump_fbsde.problems import get_problem

logging.basicConfig(level=logging.INFO)


@pytest.fixture
def ou_problem():
    """Mean-reverting problem with beta = 0.5, lambda = 1, T = 1."""
    return get_problem("ou_lipschitz", beta_const=0.5, lambda_const=1.0, T=1.0)


@pytest.fixture
def driftless_problem():
    return get_problem("driftless", beta_const=0.5, lambda_const=1.0, T=1.0, x0=0.0)


@pytest.fixture
def cubic_basis():
    return BasisSpec(degree=3)


@pytest.fixture
def config_file(tmp_path):
    def write(text):
        path = tmp_path / "problem.cfg"
        path.write_text(text, encoding="utf-8")
        return str(path)

    return write
