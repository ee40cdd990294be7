"""
Implicit backward schemes for the post-jump branches and the pre-jump component.

Every branch j = 0..n is a Brownian BSDE solved on X^1(t_j) from t_n back to
t_j with the u-argument of the generator held at 0. The value of branch j at
its own start date feeds the diagonal Y^1_{t_j}(t_j), which the pre-jump
scheme consumes through u = diagonal - y.

Each backward step fits E[Y_{i}] on the state at t_{i-1}, then fits
E[(Y_{i} - E[Y_{i}]) dW_i] / dt_i against the fitted mean, and resolves y by
Picard iteration with z held explicit.

Branch solves are independent and fan out on a thread pool through
``asyncio.gather``; results are stored by branch index, so the output does
not depend on completion order.
"""

import asyncio
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union
import numpy as np
import pandas as pd
from .condexp import BasisSpec, ConditionalExpectation, as_backend
from .config import DEFAULT_VALUES
from .forward import BranchEnsemble, BundleMismatchError, PathBundle
from .model import (
    Generator,
    GeneratorKind,
    MissingConstantsError,
    ProblemSpec,
    a_priori_y_bound,
    effective_generator,
)
from .prometheus_metrics import (
    observe_picard_iterations,
    observe_stage_duration,
    update_initial_value,
)
from .timegrid import TimeGrid

logger = logging.getLogger(__name__)


class NonConvergence(Exception):
    """Exception raised when the implicit step's fixed-point iteration fails."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class UnsolvedBranchError(Exception):
    """Exception raised when the pre-jump scheme is started before every branch is solved."""


def implicit_step(
    f_eff: Generator,
    x: np.ndarray,
    e_y: np.ndarray,
    z: np.ndarray,
    t: float,
    dt: float,
    *,
    diagonal: Optional[np.ndarray] = None,
    lipschitz_y: Optional[float] = None,
    tol: float = DEFAULT_VALUES["picard_tol"],
    max_iter: int = DEFAULT_VALUES["picard_max_iter"],
) -> np.ndarray:
    """
    Solve y = e_y + f_eff(t, x, y, z, u) dt by Picard iteration from y = e_y.

    ``u`` is ``diagonal - y`` when a diagonal is given, else 0.

    Raises:
        NonConvergence: when lipschitz_y * dt >= 1 (before iterating), when
            an iterate is non-finite, or after ``max_iter`` iterations.
    """
    if dt <= 0:
        raise ValueError(f"Step length must be positive, got {dt}")
    if lipschitz_y is not None and lipschitz_y * dt >= 1.0:
        raise NonConvergence(
            f"Contraction bound violated: L_y * dt = {lipschitz_y * dt:.6g} >= 1", np.inf
        )
    e_y = np.asarray(e_y, dtype=float)
    zeros = np.zeros_like(e_y)
    y = e_y
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        u = diagonal - y if diagonal is not None else zeros
        y_next = e_y + np.asarray(f_eff(t, x, y, z, u), dtype=float) * dt
        if not np.isfinite(y_next).all():
            raise NonConvergence(f"Non-finite Picard iterate at t={t}", np.inf)
        residual = float(np.max(np.abs(y_next - y))) if y_next.size else 0.0
        y = y_next
        if residual <= tol:
            observe_picard_iterations(iteration)
            return np.broadcast_to(y, e_y.shape).copy()
    raise NonConvergence(
        f"Picard iteration did not converge in {max_iter} iterations at t={t} "
        f"(residual {residual:.3e})",
        residual,
    )


@dataclass(eq=False)
class BranchSolution:
    """Y^1 and Z^1 of branch j on dates t_j..t_n, column k holding t_{j+k}."""

    j: int
    y: Optional[np.ndarray]
    z: Optional[np.ndarray]
    y_fits: List = field(default_factory=list)
    z_fits: List = field(default_factory=list)

    @property
    def start_value(self) -> np.ndarray:
        return self.y[:, 0]


def _backward_sweep(
    spec: ProblemSpec,
    f_eff: Generator,
    grid: TimeGrid,
    states: np.ndarray,
    dw: np.ndarray,
    start: int,
    backend: ConditionalExpectation,
    chain: str,
    diagonal: Optional[np.ndarray] = None,
    tol: float = DEFAULT_VALUES["picard_tol"],
    max_iter: int = DEFAULT_VALUES["picard_max_iter"],
):
    """Shared recursion; ``states`` column k is the chain at t_{start+k}."""
    n_paths, columns = states.shape
    y = np.empty((n_paths, columns))
    z = np.zeros((n_paths, columns))
    y[:, -1] = np.broadcast_to(np.asarray(spec.g(states[:, -1]), dtype=float), (n_paths,))
    y_fits: List = [None] * columns
    z_fits: List = [None] * columns
    dt = grid.dt
    lipschitz_y = spec.lipschitz_y()
    for i in range(grid.n, start, -1):
        col = i - start
        state = states[:, col - 1]
        increment = dw[:, i - 1]
        step = dt[i - 1]
        (fit_y,) = backend.fit_many(state, [y[:, col]], chain)
        e_y = fit_y(state)
        # centred target, same conditional mean as Y dW / dt
        (fit_z,) = backend.fit_many(state, [(y[:, col] - e_y) * increment / step], chain)
        z[:, col - 1] = fit_z(state)
        y[:, col - 1] = implicit_step(
            f_eff,
            state,
            e_y,
            z[:, col - 1],
            grid.points[i - 1],
            step,
            diagonal=None if diagonal is None else diagonal[:, i - 1],
            lipschitz_y=lipschitz_y,
            tol=tol,
            max_iter=max_iter,
        )
        y_fits[col - 1], z_fits[col - 1] = fit_y, fit_z
    return y, z, y_fits, z_fits


def _check_y_bound(
    spec: ProblemSpec, y: np.ndarray, label: str, logger: logging.Logger = logger
):
    if spec.generator_kind is not GeneratorKind.LIPSCHITZ:
        return
    try:
        bound = a_priori_y_bound(spec)
    except MissingConstantsError:
        return
    largest = float(np.max(np.abs(y)))
    if largest > bound:
        logger.warning(
            f"{label}: max |Y| = {largest:.6g} exceeds the a priori bound {bound:.6g}"
        )


def solve_branch(
    spec: ProblemSpec,
    grid: TimeGrid,
    ensemble: BranchEnsemble,
    bundle: PathBundle,
    j: int,
    basis: Union[BasisSpec, ConditionalExpectation],
    f_eff: Optional[Generator] = None,
) -> BranchSolution:
    """Backward recursion of branch j from t_n to t_j with u = 0."""
    if ensemble.bundle is not bundle:
        raise BundleMismatchError("Ensemble was built from another bundle")
    f_eff = effective_generator(spec) if f_eff is None else f_eff
    y, z, y_fits, z_fits = _backward_sweep(
        spec, f_eff, grid, ensemble.branch_tail(j), bundle.dw, j, as_backend(basis), "branch"
    )
    _check_y_bound(spec, y, f"Branch {j}")
    logger.debug(f"Branch {j} solved, Y at start in [{y[:, 0].min():.6g}, {y[:, 0].max():.6g}]")
    return BranchSolution(j=j, y=y, z=z, y_fits=y_fits, z_fits=z_fits)


class BranchBackward:
    """
    Solutions of all branches.

    ``full`` keeps every branch array. ``compact`` keeps only the diagonal
    and, per path, the values of the branch that path uses after its jump
    (``selected_y``/``selected_z``, NaN before pi(tau) and for tau > T).
    """

    def __init__(
        self,
        grid: TimeGrid,
        bundle: PathBundle,
        keep: str = "full",
        logger: Optional[logging.Logger] = None,
    ):
        self.logger = logger or logging.getLogger(__name__)
        if keep not in ("full", "compact"):
            self.logger.error(f"Unknown keep mode {keep!r}")
            raise ValueError(f"Unknown keep mode {keep!r}")
        self.grid = grid
        self.keep = keep
        self.jump_index = bundle.jump_index()
        shape = (bundle.n_paths, grid.n + 1)
        self.solutions: List[Optional[BranchSolution]] = [None] * (grid.n + 1)
        self.diagonal = np.full(shape, np.nan)
        self.selected_y = np.full(shape, np.nan)
        self.selected_z = np.full(shape, np.nan)
        self.solved = np.zeros(grid.n + 1, dtype=bool)

    def add(self, solution: BranchSolution):
        j = solution.j
        self.diagonal[:, j] = solution.start_value
        rows = self.jump_index == j
        self.selected_y[rows, j:] = solution.y[rows]
        self.selected_z[rows, j:] = solution.z[rows]
        if self.keep == "compact":
            solution = BranchSolution(j=j, y=None, z=None, y_fits=solution.y_fits, z_fits=solution.z_fits)
        self.solutions[j] = solution
        self.solved[j] = True
        self.logger.debug(f"Branch {j} stored ({int(rows.sum())} paths jump onto it)")

    @property
    def complete(self) -> bool:
        return bool(self.solved.all())

    def missing(self) -> List[int]:
        return [int(j) for j in np.flatnonzero(~self.solved)]

    def solution(self, j: int) -> BranchSolution:
        solution = self.solutions[j]
        if solution is None:
            raise UnsolvedBranchError(f"Branch {j} is not solved")
        if solution.y is None:
            raise ValueError(f"Branch {j} arrays were dropped (compact store)")
        return solution


async def solve_branches_async(
    spec: ProblemSpec,
    grid: TimeGrid,
    ensemble: BranchEnsemble,
    bundle: PathBundle,
    basis: Union[BasisSpec, ConditionalExpectation],
    threads: int = DEFAULT_VALUES["threads"],
    keep: str = "full",
    logger: Optional[logging.Logger] = None,
) -> BranchBackward:
    """Solve branches 0..n concurrently on a thread pool."""
    start_time = time.time()
    f_eff = effective_generator(spec)
    store = BranchBackward(grid, bundle, keep, logger)
    loop = asyncio.get_running_loop()

    async def solve(j: int):
        solution = await loop.run_in_executor(
            executor, solve_branch, spec, grid, ensemble, bundle, j, basis, f_eff
        )
        store.add(solution)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        await asyncio.gather(*(solve(j) for j in range(grid.n + 1)))
    observe_stage_duration("branches", time.time() - start_time)
    store.logger.info(f"Solved {grid.n + 1} branches with {threads} thread(s)")
    return store


def solve_branches(
    spec: ProblemSpec,
    grid: TimeGrid,
    ensemble: BranchEnsemble,
    bundle: PathBundle,
    basis: Union[BasisSpec, ConditionalExpectation],
    threads: int = DEFAULT_VALUES["threads"],
    keep: str = "full",
    logger: Optional[logging.Logger] = None,
) -> BranchBackward:
    return asyncio.run(
        solve_branches_async(spec, grid, ensemble, bundle, basis, threads, keep, logger)
    )


def diagonal(
    branch_solutions: Union[BranchBackward, Sequence[Optional[BranchSolution]]],
    ensemble: BranchEnsemble,
) -> np.ndarray:
    """Y^1_{t_i}(t_i) per path for i = 0..n."""
    n_dates = ensemble.grid.n + 1
    if isinstance(branch_solutions, BranchBackward):
        if not branch_solutions.complete:
            raise UnsolvedBranchError(f"Unsolved branches: {branch_solutions.missing()}")
        return branch_solutions.diagonal.copy()
    if len(branch_solutions) != n_dates:
        raise UnsolvedBranchError(f"Expected {n_dates} branches, got {len(branch_solutions)}")
    values = np.empty_like(ensemble.x0_chain)
    for j, solution in enumerate(branch_solutions):
        if solution is None or solution.y is None:
            raise UnsolvedBranchError(f"Branch {j} is not solved")
        values[:, j] = solution.start_value
    return values


@dataclass(eq=False)
class ZeroBackward:
    """Pre-jump Y^0, Z^0 on every grid date plus the diagonal they consumed."""

    y: np.ndarray
    z: np.ndarray
    diagonal: np.ndarray
    y_fits: List = field(default_factory=list)
    z_fits: List = field(default_factory=list)
    logger: Optional[logging.Logger] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.logger = self.logger or logging.getLogger(__name__)

    @property
    def initial_value(self) -> float:
        return float(self.y[0, 0])


def solve_zero(
    spec: ProblemSpec,
    grid: TimeGrid,
    ensemble: BranchEnsemble,
    bundle: PathBundle,
    diagonal_values: Union[BranchBackward, np.ndarray],
    basis: Union[BasisSpec, ConditionalExpectation],
    logger: Optional[logging.Logger] = None,
) -> ZeroBackward:
    """
    Pre-jump scheme with generator f(t, x, y, z, diagonal - y).

    Raises:
        UnsolvedBranchError: if any branch (or diagonal entry) is missing.
    """
    if ensemble.bundle is not bundle:
        raise BundleMismatchError("Ensemble was built from another bundle")
    if isinstance(diagonal_values, BranchBackward):
        diagonal_values = diagonal(diagonal_values, ensemble)
    diagonal_values = np.asarray(diagonal_values, dtype=float)
    if diagonal_values.shape != ensemble.x0_chain.shape:
        raise UnsolvedBranchError(
            f"Diagonal of shape {diagonal_values.shape} does not cover every branch"
        )
    if np.isnan(diagonal_values).any():
        missing = np.flatnonzero(np.isnan(diagonal_values).any(axis=0))
        raise UnsolvedBranchError(f"Unsolved branches: {missing.tolist()}")
    start_time = time.time()
    y, z, y_fits, z_fits = _backward_sweep(
        spec,
        effective_generator(spec),
        grid,
        ensemble.x0_chain,
        bundle.dw,
        0,
        as_backend(basis),
        "zero",
        diagonal=diagonal_values,
    )
    zero = ZeroBackward(
        y=y, z=z, diagonal=diagonal_values, y_fits=y_fits, z_fits=z_fits, logger=logger
    )
    _check_y_bound(spec, y, "Pre-jump component", zero.logger)
    observe_stage_duration("zero", time.time() - start_time)
    update_initial_value(spec.name, zero.initial_value)
    zero.logger.info(f"Pre-jump component solved for {spec.name}: Y0 = {zero.initial_value:.10g}")
    return zero


def dump_solution(
    zero: ZeroBackward, branches: BranchBackward, path: Union[str, os.PathLike]
) -> pd.DataFrame:
    """
    Write the CSV ``kind,branch,i,path,y,z``.

    Zero rows come first (branch -1), then branches by index; within a block
    rows are ordered by i then path. Needs a ``full`` branch store.
    """
    n_paths, n_dates = zero.y.shape
    frames = [
        pd.DataFrame(
            {
                "kind": "zero",
                "branch": -1,
                "i": np.repeat(np.arange(n_dates), n_paths),
                "path": np.tile(np.arange(n_paths), n_dates),
                "y": zero.y.T.reshape(-1),
                "z": zero.z.T.reshape(-1),
            }
        )
    ]
    for j in range(n_dates):
        solution = branches.solution(j)
        columns = n_dates - j
        frames.append(
            pd.DataFrame(
                {
                    "kind": "branch",
                    "branch": j,
                    "i": np.repeat(np.arange(j, n_dates), n_paths),
                    "path": np.tile(np.arange(n_paths), columns),
                    "y": solution.y.T.reshape(-1),
                    "z": solution.z.T.reshape(-1),
                }
            )
        )
    frame = pd.concat(frames, ignore_index=True)
    frame.to_csv(path, index=False)
    logger.info(f"Solution dump written to {path} ({len(frame)} rows)")
    return frame
