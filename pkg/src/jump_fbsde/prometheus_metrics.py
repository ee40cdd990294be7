"""
Prometheus metrics definitions for the jump FBSDE solver.

This module defines and initializes the Prometheus metrics used for monitoring
simulation volume, regression health, implicit-step effort and convergence
studies.
"""

from prometheus_client import Counter, Gauge, Histogram
from .config import METRIC_NAMES

# Metrics Definitions
fbsde_paths_simulated = Counter(
    METRIC_NAMES["fbsde_paths_simulated"],
    "Total number of Brownian paths simulated",
    ["n_steps"],
)
fbsde_regression_fits = Counter(
    METRIC_NAMES["fbsde_regression_fits"],
    "Total number of least-squares conditional expectation fits",
    ["chain"],
)
fbsde_rank_deficient_fits = Counter(
    METRIC_NAMES["fbsde_rank_deficient_fits"],
    "Total number of rank-deficient regression designs",
    ["chain"],
)
fbsde_validation_violations = Counter(
    METRIC_NAMES["fbsde_validation_violations"],
    "Total number of assumption violations found by probing",
    ["assumption"],
)
fbsde_picard_iterations = Histogram(
    METRIC_NAMES["fbsde_picard_iterations"],
    "Picard iterations needed by one implicit backward step",
    buckets=(1, 2, 3, 5, 8, 13, 21, 34, 50),
)
fbsde_stage_duration_seconds = Histogram(
    METRIC_NAMES["fbsde_stage_duration_seconds"],
    "Wall time spent in a solver stage in seconds",
    ["stage"],
)
fbsde_convergence_slope = Gauge(
    METRIC_NAMES["fbsde_convergence_slope"],
    "Last fitted log-log slope of a squared error against n",
    ["problem", "metric"],
)
fbsde_initial_value = Gauge(
    METRIC_NAMES["fbsde_initial_value"],
    "Last computed initial value of the pre-jump backward scheme",
    ["problem"],
)


def update_paths_simulated(n_steps: int, count: int):
    fbsde_paths_simulated.labels(n_steps=str(n_steps)).inc(count)


def update_regression_fits(chain: str, count: int = 1, rank_deficient: bool = False):
    fbsde_regression_fits.labels(chain=chain).inc(count)
    if rank_deficient:
        fbsde_rank_deficient_fits.labels(chain=chain).inc()


def update_validation_violations(assumption: str):
    fbsde_validation_violations.labels(assumption=assumption).inc()


def observe_picard_iterations(iterations: int):
    fbsde_picard_iterations.observe(iterations)


def observe_stage_duration(stage: str, seconds: float):
    fbsde_stage_duration_seconds.labels(stage=stage).observe(seconds)


def update_convergence_slope(problem: str, metric: str, slope: float):
    fbsde_convergence_slope.labels(problem=problem, metric=metric).set(slope)


def update_initial_value(problem: str, value: float):
    fbsde_initial_value.labels(problem=problem).set(value)
