import logging
import numpy as np
import pandas as pd
import pytest
from jump_fbsde.backward import (
    BranchBackward,
    NonConvergence,
    UnsolvedBranchError,
    diagonal,
    dump_solution,
    implicit_step,
    solve_branch,
    solve_branches,
    solve_branches_async,
    solve_zero,
)
from jump_fbsde.forward import build_ensemble, simulate_bundle
from jump_fbsde.model import a_priori_y_bound
from jump_fbsde.problems import get_problem
from jump_fbsde.timegrid import build_uniform


def linear_generator(alpha):
    return lambda t, x, y, z, u: alpha * y


def rms(values):
    return float(np.sqrt(np.mean(values**2)))


def test_implicit_step_explicit_case():
    e_y = np.array([0.5, -1.0])
    y = implicit_step(lambda t, x, y, z, u: np.zeros_like(y), e_y, e_y, e_y, 0.0, 0.1)
    np.testing.assert_array_equal(y, e_y)


def test_implicit_step_linear_fixed_point():
    y = implicit_step(linear_generator(1.0), np.zeros(3), np.ones(3), np.zeros(3), 0.0, 0.1)
    np.testing.assert_allclose(y, 1.0 / 0.9, rtol=0, atol=1e-10)


def test_implicit_step_residual_contract():
    f = lambda t, x, y, z, u: 0.3 * np.sin(y) + z
    x, e_y, z = np.zeros(4), np.linspace(-1, 1, 4), np.full(4, 0.2)
    y = implicit_step(f, x, e_y, z, 0.0, 0.25)
    assert np.max(np.abs(y - e_y - f(0.0, x, y, z, 0.0) * 0.25)) <= 1e-11


def test_implicit_step_uses_diagonal():
    f = lambda t, x, y, z, u: u
    y = implicit_step(f, np.zeros(1), np.zeros(1), np.zeros(1), 0.0, 0.5, diagonal=np.array([3.0]))
    # y = 0.5 (3 - y)
    np.testing.assert_allclose(y, [1.0], atol=1e-11)


def test_implicit_step_contraction_precheck():
    with pytest.raises(NonConvergence) as excinfo:
        implicit_step(linear_generator(10.0), np.zeros(1), np.ones(1), np.zeros(1), 0.0, 0.1, lipschitz_y=10.0)
    assert excinfo.value.residual == np.inf


def test_implicit_step_max_iter():
    with pytest.raises(NonConvergence) as excinfo:
        implicit_step(linear_generator(0.9), np.zeros(1), np.ones(1), np.zeros(1), 0.0, 1.0, max_iter=5)
    assert excinfo.value.residual > 0


def test_implicit_step_rejects_non_positive_step():
    with pytest.raises(ValueError):
        implicit_step(linear_generator(0.0), np.zeros(1), np.ones(1), np.zeros(1), 0.0, 0.0)


def test_solve_branch_driftless_linear(linear_spec, grid, bundle, linear_ensemble, basis):
    solution = solve_branch(linear_spec, grid, linear_ensemble, bundle, 2, basis)
    tail = linear_ensemble.branch_tail(2)
    np.testing.assert_array_equal(solution.y[:, -1], tail[:, -1])
    # exact up to the sample projection of the increments onto the basis
    assert rms(solution.y - tail) < 0.1
    assert rms(solution.z[:, :-1] - 1.0) < 0.3
    np.testing.assert_allclose(solution.z[:, :-1].mean(axis=0), 1.0, atol=0.25)
    np.testing.assert_array_equal(solution.z[:, -1], 0.0)


def test_solve_branch_linear_generator(spec_factory, grid, bundle, basis):
    spec = spec_factory(g=lambda x: np.ones(np.shape(x)), f=linear_generator(0.5))
    ensemble = build_ensemble(spec, grid, bundle)
    solution = solve_branch(spec, grid, ensemble, bundle, 0, basis)
    expected = (1.0 - 0.5 / 8) ** -np.arange(8, -1, -1)
    np.testing.assert_allclose(solution.y, np.broadcast_to(expected, solution.y.shape), rtol=1e-10)


def test_branches_coincide_without_kick(spec_factory, grid, bundle, basis):
    spec = spec_factory(g=np.tanh, f=lambda t, x, y, z, u: 0.1 * y + 0.1 * np.cos(z), beta=0.0)
    ensemble = build_ensemble(spec, grid, bundle)
    first = solve_branch(spec, grid, ensemble, bundle, 0, basis)
    later = solve_branch(spec, grid, ensemble, bundle, 5, basis)
    np.testing.assert_array_equal(later.y, first.y[:, 5:])
    np.testing.assert_array_equal(later.z, first.z[:, 5:])


def test_diagonal_driftless(linear_spec, grid, bundle, linear_ensemble, basis):
    branches = solve_branches(linear_spec, grid, linear_ensemble, bundle, basis)
    values = diagonal(branches, linear_ensemble)
    assert rms(values - linear_ensemble.x0_chain - 0.5) < 0.1
    np.testing.assert_array_equal(values[:, -1], linear_ensemble.branch_tail(grid.n)[:, 0])


def test_diagonal_from_solution_list(linear_spec, grid, bundle, linear_ensemble, basis):
    solutions = [solve_branch(linear_spec, grid, linear_ensemble, bundle, j, basis) for j in range(grid.n + 1)]
    store = solve_branches(linear_spec, grid, linear_ensemble, bundle, basis)
    np.testing.assert_array_equal(diagonal(solutions, linear_ensemble), diagonal(store, linear_ensemble))
    solutions[4] = None
    with pytest.raises(UnsolvedBranchError):
        diagonal(solutions, linear_ensemble)


async def test_solve_branches_async_thread_independent(linear_spec, grid, bundle, linear_ensemble, basis):
    single = await solve_branches_async(linear_spec, grid, linear_ensemble, bundle, basis, threads=1)
    pooled = await solve_branches_async(linear_spec, grid, linear_ensemble, bundle, basis, threads=4)
    assert single.complete and pooled.complete
    np.testing.assert_array_equal(single.diagonal, pooled.diagonal)
    for j in range(grid.n + 1):
        np.testing.assert_array_equal(single.solution(j).y, pooled.solution(j).y)


def test_compact_store_keeps_selected_values(linear_spec, grid, bundle, linear_ensemble, basis):
    full = solve_branches(linear_spec, grid, linear_ensemble, bundle, basis, keep="full")
    compact = solve_branches(linear_spec, grid, linear_ensemble, bundle, basis, keep="compact")
    np.testing.assert_array_equal(full.selected_y, compact.selected_y)
    np.testing.assert_array_equal(full.diagonal, compact.diagonal)
    with pytest.raises(ValueError):
        compact.solution(0)
    k = bundle.jump_index()
    p = int(np.flatnonzero(k >= 0)[0])
    np.testing.assert_array_equal(full.selected_y[p, k[p]:], full.solution(k[p]).y[p])


def test_solve_zero_fails_fast(linear_spec, grid, bundle, linear_ensemble, basis):
    store = BranchBackward(grid, bundle)
    store.add(solve_branch(linear_spec, grid, linear_ensemble, bundle, 0, basis))
    with pytest.raises(UnsolvedBranchError, match="1"):
        solve_zero(linear_spec, grid, linear_ensemble, bundle, store, basis)


def test_solve_zero_driftless_linear(linear_spec, grid, bundle, linear_ensemble, basis):
    branches = solve_branches(linear_spec, grid, linear_ensemble, bundle, basis)
    zero = solve_zero(linear_spec, grid, linear_ensemble, bundle, branches, basis)
    assert rms(zero.y - linear_ensemble.x0_chain) < 0.1
    assert zero.initial_value == pytest.approx(0.0, abs=0.1)
    np.testing.assert_array_equal(zero.y[:, 0], zero.y[0, 0])


def test_exact_zero_propagation(zero_spec, grid, bundle, basis):
    ensemble = build_ensemble(zero_spec, grid, bundle)
    branches = solve_branches(zero_spec, grid, ensemble, bundle, basis)
    zero = solve_zero(zero_spec, grid, ensemble, bundle, branches, basis)
    assert not np.any(zero.y) and not np.any(zero.z)
    assert not np.any(branches.diagonal)


def test_pre_jump_generator_consumes_diagonal(spec_factory, grid, bundle, basis):
    spec = spec_factory(g=lambda x: np.ones(np.shape(x)), f=lambda t, x, y, z, u: u)
    ensemble = build_ensemble(spec, grid, bundle)
    zero = solve_zero(spec, grid, ensemble, bundle, np.full((bundle.n_paths, grid.n + 1), 2.0), basis)
    # y_{i-1} = y_i + (2 - y_{i-1}) dt
    expected = [1.0]
    for _ in range(grid.n):
        expected.append((expected[-1] + 2.0 / 8) / (1.0 + 1.0 / 8))
    np.testing.assert_allclose(zero.y[0], expected[::-1], rtol=1e-10)


def test_dump_solution(linear_spec, jump, basis, tmp_path):
    grid = build_uniform(1.0, 2)
    bundle = simulate_bundle(grid, jump, 100, seed=0)
    ensemble = build_ensemble(linear_spec, grid, bundle)
    branches = solve_branches(linear_spec, grid, ensemble, bundle, basis)
    zero = solve_zero(linear_spec, grid, ensemble, bundle, branches, basis)
    path = tmp_path / "solution.csv"
    dump_solution(zero, branches, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["kind", "branch", "i", "path", "y", "z"]
    # zero: 3 dates, branches: 3 + 2 + 1 dates, 100 paths each
    assert len(frame) == 900
    assert set(frame[frame["kind"] == "zero"]["branch"]) == {-1}
    last = frame[(frame["kind"] == "branch") & (frame["branch"] == 2)]
    np.testing.assert_allclose(last["y"], ensemble.branch_tail(2)[:, 0])


def test_z_is_invariant_to_payoff_shift(spec_factory, grid, bundle, basis):
    plain = spec_factory(g=lambda x: np.asarray(x, dtype=float))
    shifted = spec_factory(g=lambda x: np.asarray(x, dtype=float) + 100.0)
    z_plain = solve_branch(plain, grid, build_ensemble(plain, grid, bundle), bundle, 0, basis).z
    z_shifted = solve_branch(shifted, grid, build_ensemble(shifted, grid, bundle), bundle, 0, basis).z
    np.testing.assert_allclose(z_shifted, z_plain, rtol=0, atol=1e-8)


def test_solution_respects_a_priori_y_bound(grid, jump, basis):
    problem = get_problem("ou_lipschitz")
    bundle = simulate_bundle(grid, jump, 2000, seed=8)
    ensemble = build_ensemble(problem.spec, grid, bundle)
    branches = solve_branches(problem.spec, grid, ensemble, bundle, basis)
    zero = solve_zero(problem.spec, grid, ensemble, bundle, branches, basis)
    bound = a_priori_y_bound(problem.spec)
    assert np.max(np.abs(zero.y)) <= bound
    assert np.nanmax(np.abs(branches.selected_y)) <= bound


def test_a_priori_y_bound_breach_is_logged(spec_factory, grid, bundle, basis, caplog):
    spec = spec_factory(g=lambda x: 10.0 * np.asarray(x, dtype=float), K=0.1)
    with caplog.at_level(logging.WARNING, logger="jump_fbsde.backward"):
        solve_branch(spec, grid, build_ensemble(spec, grid, bundle), bundle, 0, basis)
    assert "exceeds the a priori bound" in caplog.text


def test_custom_logger_receives_branch_and_zero_messages(linear_spec, grid, bundle, linear_ensemble, basis, mocker):
    custom = mocker.Mock(spec=logging.Logger)
    branches = solve_branches(linear_spec, grid, linear_ensemble, bundle, basis, threads=1, logger=custom)
    assert branches.logger is custom
    assert custom.debug.call_count == grid.n + 1
    custom.info.assert_called_once_with(f"Solved {grid.n + 1} branches with 1 thread(s)")

    zero = solve_zero(linear_spec, grid, linear_ensemble, bundle, branches, basis, logger=custom)
    assert zero.logger is custom
    assert "Pre-jump component solved" in custom.info.call_args.args[0]


def test_branch_store_rejects_unknown_keep_mode(grid, bundle, mocker):
    custom = mocker.Mock(spec=logging.Logger)
    with pytest.raises(ValueError):
        BranchBackward(grid, bundle, keep="sparse", logger=custom)
    custom.error.assert_called_once()


def test_default_logger_is_module_logger(grid, bundle):
    assert BranchBackward(grid, bundle).logger is logging.getLogger("jump_fbsde.backward")
