import dataclasses
import math
import numpy as np
import pytest
from jump_fbsde.backward import solve_branch, solve_branches, solve_zero
from jump_fbsde.cli import run_cli
from jump_fbsde.condexp import BasisSpec
from jump_fbsde.forward import build_ensemble, simulate_bundle
from jump_fbsde.harness import (
    ClosedFormReference,
    convergence_study,
    error_metrics,
    intermediary_decomposition,
    run_pipeline,
)
from jump_fbsde.model import (
    Constants,
    GeneratorKind,
    effective_generator,
    truncation_bound,
)
from jump_fbsde.problems import BuiltinProblem, get_problem
from jump_fbsde.timegrid import build_uniform

pytestmark = pytest.mark.integration


def test_forward_rate(ou_problem, cubic_basis):
    table = convergence_study(
        ou_problem, [8, 16, 32, 64], 100000, cubic_basis, seed=11, factor=4, forward_only=True
    )
    errors = table.to_frame()["err_x_sq"].to_numpy()
    assert np.all(np.diff(errors) < 0)
    assert -1.3 <= table.slopes["err_x_sq"] <= -0.7


def test_backward_rate(ou_problem, cubic_basis):
    # reference on the same cubic basis
    table = convergence_study(
        ou_problem, [4, 8, 16, 32], 50000, cubic_basis, seed=12, factor=2, reference_boost=0
    )
    frame = table.to_frame()
    assert np.all(np.diff(frame["err_z_sq"].to_numpy()) < 0)
    assert -1.3 <= table.slopes["err_y_sq"] <= -0.7
    assert table.slopes["err_z_sq"] <= -0.5
    assert table.slopes["err_u_sq"] <= -0.5


def test_driftless_closed_form(driftless_problem, cubic_basis):
    paths = 200000
    grid = build_uniform(1.0, 32)
    bundle = simulate_bundle(grid, driftless_problem.jump, paths, seed=13)
    sol = run_pipeline(driftless_problem, grid, bundle, cubic_basis)
    reference = ClosedFormReference(driftless_problem, bundle)
    report = error_metrics(sol, reference, driftless_problem.jump)

    w_T = bundle.brownian()[:, -1]
    standard_error = float(np.std(w_T, ddof=1) / math.sqrt(paths))
    exact = 0.5 * (1.0 - math.exp(-1.0))
    # Y0 carries the sample mean of W_T, the closed form its expectation 0
    assert abs(sol.initial_value - np.mean(w_T) - exact) <= 3 * standard_error
    _, _, _, u = sol.evaluate(0.0)
    assert abs(float(np.mean(u)) - 0.5 * math.exp(-1.0)) <= 3 * standard_error
    # Z = 1 up to the regression noise of the centred Z-targets
    assert report.err_z_sq < 1e-3
    assert math.sqrt(report.err_z_sq) < 0.02


@pytest.mark.parametrize("n", [4, 8, 16])
def test_exact_zero_propagation(n):
    zero = lambda t, x: np.zeros(np.shape(x))
    problem = get_problem("ou_lipschitz")
    spec = dataclasses.replace(
        problem.spec,
        g=lambda x: np.zeros(np.shape(x)),
        f=lambda t, x, y, z, u: np.zeros(np.shape(y)),
        b=zero,
    )
    grid = build_uniform(1.0, n)
    bundle = simulate_bundle(grid, problem.jump, 1000, seed=n)
    values = run_pipeline(BuiltinProblem(spec, problem.jump), grid, bundle, BasisSpec()).on_grid()
    assert not np.any(values.y) and not np.any(values.z) and not np.any(values.u)


def test_brownian_reduction(cubic_basis):
    problem = get_problem("ou_lipschitz", beta_const=0.0)
    spec = dataclasses.replace(problem.spec, f=lambda t, x, y, z, u: 0.2 * y + 0.1 * np.sin(z))
    grid = build_uniform(1.0, 16)
    bundle = simulate_bundle(grid, problem.jump, 20000, seed=14)
    ensemble = build_ensemble(spec, grid, bundle)
    branches = solve_branches(spec, grid, ensemble, bundle, cubic_basis, keep="full")
    zero = solve_zero(spec, grid, ensemble, bundle, branches, cubic_basis)
    standalone = solve_branch(spec, grid, ensemble, bundle, 0, cubic_basis)
    np.testing.assert_array_equal(zero.y, standalone.y)
    np.testing.assert_array_equal(zero.z, standalone.z)
    for j in range(grid.n + 1):
        np.testing.assert_array_equal(branches.solution(j).y, zero.y[:, j:])
    np.testing.assert_array_equal(zero.diagonal - zero.y, 0.0)


def test_quadratic_truncation_is_a_no_op(cubic_basis):
    problem = get_problem("quadratic_toy")
    grid = build_uniform(1.0, 16)
    bundle = simulate_bundle(grid, problem.jump, 20000, seed=15)
    quadratic = run_pipeline(problem, grid, bundle, cubic_basis, keep="full")

    truncated = dataclasses.replace(
        problem.spec, generator_kind=GeneratorKind.LIPSCHITZ, f=effective_generator(problem.spec)
    )
    lipschitz = run_pipeline(BuiltinProblem(truncated, problem.jump), grid, bundle, cubic_basis, keep="full")
    np.testing.assert_array_equal(quadratic.zero.y, lipschitz.zero.y)
    np.testing.assert_array_equal(quadratic.zero.z, lipschitz.zero.z)

    largest_z = max(
        float(np.max(np.abs(quadratic.zero.z))),
        max(float(np.max(np.abs(quadratic.branches.solution(j).z))) for j in range(grid.n + 1)),
    )
    assert largest_z < truncation_bound(problem.spec)
    untruncated = dataclasses.replace(problem.spec, generator_kind=GeneratorKind.LIPSCHITZ)
    raw = run_pipeline(BuiltinProblem(untruncated, problem.jump), grid, bundle, cubic_basis)
    np.testing.assert_array_equal(quadratic.zero.y, raw.zero.y)


def test_truncation_bound_random_constants():
    rng = np.random.default_rng(16)
    spec = get_problem("quadratic_toy").spec
    for _ in range(5):
        L_a, K_f, K_g, K_a = rng.uniform(0.0, 2.0, 4)
        T = float(rng.uniform(0.1, 2.0))
        candidate = dataclasses.replace(
            spec, T=T, constants=dataclasses.replace(spec.constants, L_a=L_a, K_f=K_f, K_g=K_g, K_a=K_a)
        )
        post_jump = math.exp((2 * L_a + K_f) * T) * (K_g + T * K_f) * K_a
        pre_jump = (
            math.exp(2 * (K_f + L_a) * T)
            * (K_g + K_f * T)
            * (1 + T * K_f * math.exp(K_f * T) * (1 + L_a * math.exp(L_a * T)))
            * K_a
        )
        assert truncation_bound(candidate) == pytest.approx(max(post_jump, pre_jump), rel=1e-12)


def test_comparison_monotonicity(cubic_basis):
    problem = get_problem("linear_jump")
    spec = dataclasses.replace(problem.spec, g=lambda x: 1.0 + np.tanh(x) ** 2, f=lambda t, x, y, z, u: 0.1 * y + 0.1 * u)
    doubled = dataclasses.replace(
        spec, g=lambda x: 2.0 * (1.0 + np.tanh(x) ** 2), constants=Constants(K=2.0 * spec.constants.K)
    )
    grid = build_uniform(1.0, 8)
    bundle = simulate_bundle(grid, problem.jump, 20000, seed=17)
    base = run_pipeline(BuiltinProblem(spec, problem.jump), grid, bundle, cubic_basis)
    scaled = run_pipeline(BuiltinProblem(doubled, problem.jump), grid, bundle, cubic_basis)
    assert scaled.initial_value >= base.initial_value


def test_intermediary_decomposition(ou_problem, cubic_basis):
    decomposition = intermediary_decomposition(ou_problem, 8, 20000, cubic_basis, seed=18)
    assert decomposition.holds


def test_cli_ladder_is_byte_identical_across_threads(config_file, tmp_path):
    config = config_file("problem = ou_lipschitz\n")
    outputs = []
    for threads in ("1", "4"):
        out = tmp_path / f"table_{threads}.csv"
        code = run_cli(
            ["--config", config, "--mode", "converge", "--n-list", "4,8,16", "--paths", "5000",
             "--seed", "7", "--threads", threads, "--out", str(out)]
        )
        assert code == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
