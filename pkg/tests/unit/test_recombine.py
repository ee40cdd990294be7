import logging
import numpy as np
import pytest
from jump_fbsde.forward import PathBundle
from jump_fbsde.harness import run_pipeline
from jump_fbsde.problems import BuiltinProblem
from jump_fbsde.recombine import evaluate
from jump_fbsde.timegrid import InvalidGridError


@pytest.fixture
def linear_solution(linear_spec, jump, grid, basis):
    # tau: on a grid date, inside a step, after T
    dw = np.random.default_rng(2).normal(0.0, np.sqrt(1 / 8), (400, 8))
    tau = np.concatenate([np.full(200, 0.375), np.full(100, 0.6), np.full(100, np.inf)])
    bundle = PathBundle(grid=grid, dw=dw, tau=tau, seed=0)
    return run_pipeline(BuiltinProblem(linear_spec, jump), grid, bundle, basis, keep="full")


def test_indicator_sides_at_grid_jump(linear_solution):
    sol = linear_solution
    rows = np.arange(200)
    branch = sol.branches.solution(3)
    x, y, z, u = evaluate(sol, 0.375, rows)
    np.testing.assert_array_equal(y, branch.y[rows, 0])
    np.testing.assert_array_equal(z, sol.zero.z[rows, 3])
    np.testing.assert_array_equal(u, sol.zero.diagonal[rows, 3] - sol.zero.y[rows, 3])
    np.testing.assert_array_equal(x, sol.ensemble.branch(3)[rows, 3])


def test_branch_fixed_after_jump(linear_solution):
    sol = linear_solution
    rows = np.arange(200, 300)
    branch = sol.branches.solution(4)
    for t, i in ((0.6, 4), (0.8, 6), (1.0, 8)):
        _, y, z, u = sol.evaluate(t, rows)
        np.testing.assert_array_equal(y, branch.y[rows, i - 4])
        if t > 0.6:
            np.testing.assert_array_equal(z, branch.z[rows, i - 4])
            np.testing.assert_array_equal(u, 0.0)
        else:
            np.testing.assert_array_equal(z, sol.zero.z[rows, i])
            np.testing.assert_array_equal(u, sol.zero.diagonal[rows, i] - sol.zero.y[rows, i])


def test_no_jump_reads_zero_component(linear_solution):
    sol = linear_solution
    rows = np.arange(300, 400)
    for t in (0.0, 0.5, 1.0):
        i = sol.grid.project(t)[1]
        x, y, z, u = sol.evaluate(t, rows)
        np.testing.assert_array_equal(x, sol.ensemble.x0_chain[rows, i])
        np.testing.assert_array_equal(y, sol.zero.y[rows, i])
        np.testing.assert_array_equal(z, sol.zero.z[rows, i])
        np.testing.assert_array_equal(u, sol.zero.diagonal[rows, i] - sol.zero.y[rows, i])


def test_initial_jump_size(linear_solution):
    _, _, _, u = linear_solution.evaluate(0.0)
    # diagonal x + 0.5 minus Y0 = x
    assert np.mean(u) == pytest.approx(0.5, abs=0.1)


def test_on_grid_shapes(linear_solution):
    values = linear_solution.on_grid()
    assert values.y.shape == (400, 9)
    np.testing.assert_array_equal(values.times, linear_solution.grid.points)


def test_evaluate_outside_horizon(linear_solution):
    with pytest.raises(InvalidGridError):
        linear_solution.evaluate(1.5)


def test_forward_only_solution(linear_spec, jump, grid, bundle, basis):
    sol = run_pipeline(BuiltinProblem(linear_spec, jump), grid, bundle, basis, forward_only=True)
    x, y, z, u = sol.evaluate(0.5)
    assert np.isfinite(x).all()
    assert np.isnan(y).all() and np.isnan(z).all() and np.isnan(u).all()
    with pytest.raises(ValueError):
        _ = sol.initial_value


def test_pipeline_logger_reaches_every_component(linear_spec, jump, grid, bundle, basis, mocker):
    custom = mocker.Mock(spec=logging.Logger)
    sol = run_pipeline(BuiltinProblem(linear_spec, jump), grid, bundle, basis, logger=custom)
    assert sol.logger is custom and sol.zero.logger is custom and sol.branches.logger is custom
    sol.on_grid()
    custom.debug.assert_called_with(f"Evaluated {grid.n + 1} date(s) on {bundle.n_paths} paths")


def test_forward_only_initial_value_is_logged(linear_spec, jump, grid, bundle, basis, mocker):
    custom = mocker.Mock(spec=logging.Logger)
    sol = run_pipeline(BuiltinProblem(linear_spec, jump), grid, bundle, basis, forward_only=True, logger=custom)
    with pytest.raises(ValueError):
        _ = sol.initial_value
    custom.error.assert_called_once_with("Initial value requested from a forward-only run")


def test_default_logger_is_module_logger(linear_solution):
    assert linear_solution.logger is logging.getLogger("jump_fbsde.recombine")
