"""
Error metrics, references and convergence studies.

A reference is anything with ``tau``, ``n_paths`` and ``on_dates(times)``
returning ``GridValues`` on the same paths as the run it is compared to:
either a registered closed form evaluated on the run's Brownian paths, or
the same scheme on a refined grid driven by increments that sum to the
coarse ones.

A convergence ladder simulates a single master bundle on the finest grid,
coarsens it for every n and computes the reference once. Squared errors are
regressed on log n; a slope outside [slope_low, slope_high] is flagged.
"""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union
import numpy as np
import pandas as pd
from .backward import solve_branches, solve_zero
from .condexp import BasisSpec
from .config import DEFAULT_VALUES
from .forward import PathBundle, build_ensemble, simulate_bundle
from .model import JumpModel
from .problems import BuiltinProblem, UnknownProblemError, get_problem
from .prometheus_metrics import observe_stage_duration, update_convergence_slope
from .recombine import GlobalSolution, GridValues
from .timegrid import TimeGrid, build_uniform

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "n",
    "mesh",
    "err_x_sq",
    "err_y_sq",
    "err_z_sq",
    "err_u_sq",
    "se_x",
    "se_y",
    "se_z",
    "se_u",
    "runtime_ms",
    "seed",
]
METRICS = ("err_x_sq", "err_y_sq", "err_z_sq", "err_u_sq")

__all__ = [
    "CSV_COLUMNS",
    "ClosedFormReference",
    "ConvergenceTable",
    "ErrorDecomposition",
    "ErrorReport",
    "FineGridReference",
    "PathMismatchError",
    "UnknownProblemError",
    "convergence_study",
    "error_metrics",
    "intermediary_decomposition",
    "reference_solution",
    "run_pipeline",
]


class PathMismatchError(ValueError):
    """Exception raised when a solution and its reference do not share paths."""


class Reference(Protocol):
    tau: np.ndarray
    n_paths: int

    def on_dates(self, times: Sequence[float]) -> GridValues:
        ...


class ClosedFormReference:
    """Registered closed form evaluated on a bundle's Brownian paths."""

    def __init__(self, problem: BuiltinProblem, bundle: PathBundle):
        if problem.closed_form is None:
            raise UnknownProblemError(f"No closed form registered for {problem.name}")
        self.problem = problem
        self.bundle = bundle
        self.tau = bundle.tau
        self.n_paths = bundle.n_paths
        self._brownian = bundle.brownian()

    def on_dates(self, times: Sequence[float]) -> GridValues:
        index = self.bundle.grid.indices_of(times)
        return self.problem.closed_form(np.asarray(times, dtype=float), self._brownian[:, index], self.tau)


class FineGridReference:
    """A solved run on a grid containing the evaluation dates."""

    def __init__(self, solution: GlobalSolution):
        self.solution = solution
        self.tau = solution.tau
        self.n_paths = solution.bundle.n_paths

    def on_dates(self, times: Sequence[float]) -> GridValues:
        return self.solution.on_dates(times)


def run_pipeline(
    problem: BuiltinProblem,
    grid: TimeGrid,
    bundle: PathBundle,
    basis: BasisSpec,
    threads: int = DEFAULT_VALUES["threads"],
    keep: str = "compact",
    store_branches: bool = False,
    forward_only: bool = False,
    logger: Optional[logging.Logger] = None,
) -> GlobalSolution:
    """
    Forward ensemble, every branch, then the pre-jump component.

    ``logger`` is handed to the branch store, the pre-jump component and the
    returned solution.
    """
    ensemble = build_ensemble(problem.spec, grid, bundle, store_branches=store_branches)
    if forward_only:
        return GlobalSolution(grid=grid, bundle=bundle, ensemble=ensemble, logger=logger)
    branches = solve_branches(
        problem.spec, grid, ensemble, bundle, basis, threads, keep, logger=logger
    )
    zero = solve_zero(problem.spec, grid, ensemble, bundle, branches, basis, logger=logger)
    return GlobalSolution(
        grid=grid, bundle=bundle, ensemble=ensemble, zero=zero, branches=branches, logger=logger
    )


def _resolve(problem: Union[str, BuiltinProblem]) -> BuiltinProblem:
    return get_problem(problem) if isinstance(problem, str) else problem


def reference_solution(
    problem: Union[str, BuiltinProblem],
    grid_fine: TimeGrid,
    paths: int,
    seed: int,
    backend: str = "closed",
    basis: Optional[BasisSpec] = None,
    bundle: Optional[PathBundle] = None,
    threads: int = DEFAULT_VALUES["threads"],
    forward_only: bool = False,
) -> Reference:
    """
    Closed-form (``closed``) or fine-grid (``fine``) reference on grid_fine.

    The fine backend uses ``basis`` as given; callers enlarge it.
    """
    problem = _resolve(problem)
    if bundle is None:
        bundle = simulate_bundle(grid_fine, problem.jump, paths, seed, threads)
    start_time = time.time()
    if backend == "closed":
        reference: Reference = ClosedFormReference(problem, bundle)
    elif backend == "fine":
        solution = run_pipeline(
            problem, grid_fine, bundle, basis or BasisSpec(), threads, forward_only=forward_only
        )
        reference = FineGridReference(solution)
    else:
        raise ValueError(f"Unknown reference backend {backend!r}")
    observe_stage_duration("reference", time.time() - start_time)
    logger.info(f"Reference ready: {backend} on {grid_fine.n} steps for {problem.name}")
    return reference


def _mean_and_se(samples: np.ndarray) -> Tuple[float, float]:
    count = samples.shape[0]
    mean = float(np.mean(samples))
    if count < 2:
        return mean, 0.0
    return mean, float(np.std(samples, ddof=1) / math.sqrt(count))


@dataclass
class ErrorReport:
    err_x_sq: float
    err_y_sq: float
    err_z_sq: float
    err_u_sq: float
    se_x: float
    se_y: float
    se_z: float
    se_u: float
    n_paths: int


def error_metrics(sol: GlobalSolution, ref: Reference, jump: JumpModel) -> ErrorReport:
    """
    Monte Carlo estimates over the run's grid dates:

    err_x_sq = E max_i |dX|^2, err_y_sq = max_i E |dY|^2,
    err_z_sq = E sum_{i<n} |dZ|^2 dt, err_u_sq = E sum_{i<n} lambda(t_i) |dU|^2 dt.
    Z and U at t_n are excluded.
    """
    if ref.n_paths != sol.bundle.n_paths or not np.array_equal(ref.tau, sol.tau):
        raise PathMismatchError("Solution and reference were not driven by the same paths")
    grid = sol.grid
    ours = sol.on_grid()
    theirs = ref.on_dates(grid.points)
    dt = grid.dt
    weights = np.asarray(jump.hazard(grid.points[:-1]), dtype=float) * dt

    err_x, se_x = _mean_and_se(np.max((ours.x - theirs.x) ** 2, axis=1))
    dy = (ours.y - theirs.y) ** 2
    by_date = np.mean(dy, axis=0)
    if np.isnan(by_date).all():
        err_y, se_y = np.nan, np.nan
    else:
        worst = int(np.nanargmax(by_date))
        err_y, se_y = _mean_and_se(dy[:, worst])
    err_z, se_z = _mean_and_se(((ours.z - theirs.z)[:, :-1] ** 2) @ dt)
    err_u, se_u = _mean_and_se(((ours.u - theirs.u)[:, :-1] ** 2) @ weights)
    return ErrorReport(
        err_x_sq=err_x,
        err_y_sq=err_y,
        err_z_sq=err_z,
        err_u_sq=err_u,
        se_x=se_x,
        se_y=se_y,
        se_z=se_z,
        se_u=se_u,
        n_paths=sol.bundle.n_paths,
    )


@dataclass
class ConvergenceRow:
    n: int
    mesh: float
    report: ErrorReport
    runtime_ms: float
    seed: int

    def as_record(self) -> Dict[str, float]:
        record = {"n": self.n, "mesh": self.mesh, "runtime_ms": self.runtime_ms, "seed": self.seed}
        record.update({key: value for key, value in asdict(self.report).items() if key != "n_paths"})
        return record


@dataclass
class ConvergenceTable:
    problem: str
    rows: List[ConvergenceRow] = field(default_factory=list)
    slopes: Dict[str, Optional[float]] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    def fit_slopes(
        self,
        low: float = DEFAULT_VALUES["slope_low"],
        high: float = DEFAULT_VALUES["slope_high"],
    ) -> Dict[str, Optional[float]]:
        """Least-squares slope of log(err) against log(n) per metric."""
        if len(self.rows) < 3:
            raise ValueError("A slope fit needs at least 3 rows")
        log_n = np.log([row.n for row in self.rows])
        self.slopes, self.flags = {}, []
        for metric in METRICS:
            errors = np.array([getattr(row.report, metric) for row in self.rows], dtype=float)
            if not np.all(np.isfinite(errors)) or np.any(errors <= 0.0):
                self.slopes[metric] = None
                self.flags.append(f"{metric}: slope fit skipped (zero or missing errors)")
                continue
            slope = float(np.polyfit(log_n, np.log(errors), 1)[0])
            self.slopes[metric] = slope
            update_convergence_slope(self.problem, metric, slope)
            if not low <= slope <= high:
                self.flags.append(f"{metric}: slope {slope:.3f} outside [{low}, {high}]")
        for flag in self.flags:
            logger.warning(f"{self.problem}: {flag}")
        return self.slopes

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.as_record() for row in self.rows], columns=CSV_COLUMNS)

    def to_csv(self, path: Union[str, os.PathLike, None] = None) -> Optional[str]:
        return self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _reference_basis(basis: BasisSpec, boost: int) -> BasisSpec:
    return basis.enlarged(boost) if boost else basis


def convergence_study(
    problem: Union[str, BuiltinProblem],
    n_list: Sequence[int],
    paths: int,
    basis: BasisSpec,
    seed: int,
    reference: str = "fine",
    factor: int = DEFAULT_VALUES["fine_factor"],
    threads: int = DEFAULT_VALUES["threads"],
    record_runtime: bool = False,
    forward_only: bool = False,
    reference_boost: int = DEFAULT_VALUES["reference_degree_boost"],
) -> ConvergenceTable:
    """
    Run the pipeline for every n against one shared reference and fit slopes.

    ``runtime_ms`` is 0 unless ``record_runtime`` so the CSV is reproducible
    byte for byte.
    """
    problem = _resolve(problem)
    n_list = [int(n) for n in n_list]
    if len(n_list) < 3 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError(f"n_list must be increasing with at least 3 entries, got {n_list}")
    master_n = n_list[-1] * (factor if reference == "fine" else 1)
    for n in n_list:
        if master_n % n:
            raise ValueError(f"{n} does not divide the master step count {master_n}")
    master_grid = build_uniform(problem.spec.T, master_n)
    master = simulate_bundle(master_grid, problem.jump, paths, seed, threads)
    ref = reference_solution(
        problem,
        master_grid,
        paths,
        seed,
        backend=reference,
        basis=_reference_basis(basis, reference_boost),
        bundle=master,
        threads=threads,
        forward_only=forward_only,
    )
    table = ConvergenceTable(problem=problem.name)
    for n in n_list:
        grid = TimeGrid(master_grid.points[:: master_n // n])
        bundle = master.coarsen(grid)
        started = time.perf_counter()
        sol = run_pipeline(problem, grid, bundle, basis, threads, forward_only=forward_only)
        report = error_metrics(sol, ref, problem.jump)
        elapsed = (time.perf_counter() - started) * 1000.0 if record_runtime else 0.0
        table.rows.append(ConvergenceRow(n, grid.mesh(), report, elapsed, seed))
        logger.info(f"{problem.name} n={n}: {asdict(report)}")
    table.fit_slopes()
    return table


@dataclass
class ErrorDecomposition:
    """Y-error of the full scheme against the scheme fed a high-accuracy diagonal."""

    err_y_full: float
    err_y_intermediary: float
    substitution_error: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.err_y_full <= self.bound


def intermediary_decomposition(
    problem: Union[str, BuiltinProblem],
    n: int,
    paths: int,
    basis: BasisSpec,
    seed: int,
    factor: int = DEFAULT_VALUES["fine_factor"],
    threads: int = DEFAULT_VALUES["threads"],
    reference_boost: int = DEFAULT_VALUES["reference_degree_boost"],
) -> ErrorDecomposition:
    """
    Compare the full scheme with the intermediary scheme whose diagonal comes
    from a fine-grid, enlarged-basis branch solve on the same paths.

    substitution_error = max_i E|Y_full - Y_intermediary|^2 and
    bound = 2 err_y_intermediary + 2 substitution_error.
    """
    problem = _resolve(problem)
    coarse = build_uniform(problem.spec.T, n)
    fine = coarse.refine(factor)
    master = simulate_bundle(fine, problem.jump, paths, seed, threads)
    bundle = master.coarsen(coarse)
    accurate = run_pipeline(problem, fine, master, _reference_basis(basis, reference_boost), threads)
    reference = FineGridReference(accurate)

    full = run_pipeline(problem, coarse, bundle, basis, threads)
    accurate_diagonal = accurate.zero.diagonal[:, fine.indices_of(coarse.points)]
    zero = solve_zero(problem.spec, coarse, full.ensemble, bundle, accurate_diagonal, basis)
    intermediary = GlobalSolution(
        grid=coarse, bundle=bundle, ensemble=full.ensemble, zero=zero, branches=full.branches
    )

    err_full = error_metrics(full, reference, problem.jump).err_y_sq
    err_intermediary = error_metrics(intermediary, reference, problem.jump).err_y_sq
    substitution = float(np.max(np.mean((full.on_grid().y - intermediary.on_grid().y) ** 2, axis=0)))
    decomposition = ErrorDecomposition(
        err_y_full=err_full,
        err_y_intermediary=err_intermediary,
        substitution_error=substitution,
        bound=2.0 * err_intermediary + 2.0 * substitution,
    )
    logger.info(f"Error decomposition for {problem.name} at n={n}: {asdict(decomposition)}")
    return decomposition

