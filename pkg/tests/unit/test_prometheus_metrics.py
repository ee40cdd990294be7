from prometheus_client import REGISTRY
from jump_fbsde.prometheus_metrics import (
    observe_picard_iterations,
    update_convergence_slope,
    update_paths_simulated,
    update_regression_fits,
    update_validation_violations,
)


def sample(name, labels=None):
    return REGISTRY.get_sample_value(name, labels or {}) or 0.0


def test_paths_counter():
    before = sample("fbsde_paths_simulated_total", {"n_steps": "12"})
    update_paths_simulated(12, 500)
    assert sample("fbsde_paths_simulated_total", {"n_steps": "12"}) == before + 500


def test_rank_deficient_counter():
    before = sample("fbsde_rank_deficient_fits_total", {"chain": "branch"})
    update_regression_fits("branch", 2, rank_deficient=True)
    assert sample("fbsde_rank_deficient_fits_total", {"chain": "branch"}) == before + 1


def test_validation_violation_counter():
    before = sample("fbsde_validation_violations_total", {"assumption": "quadratic_growth"})
    update_validation_violations("quadratic_growth")
    assert sample("fbsde_validation_violations_total", {"assumption": "quadratic_growth"}) == before + 1


def test_picard_histogram():
    before = sample("fbsde_picard_iterations_count")
    observe_picard_iterations(3)
    assert sample("fbsde_picard_iterations_count") == before + 1


def test_slope_gauge():
    update_convergence_slope("ou_lipschitz", "err_x_sq", -0.98)
    assert sample("fbsde_convergence_slope", {"problem": "ou_lipschitz", "metric": "err_x_sq"}) == -0.98
