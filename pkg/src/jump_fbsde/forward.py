"""
Forward simulation: Brownian increments, jump times and the Euler chains.

Paths are simulated in fixed-size blocks. Each block draws from its own
Philox counter-based substream keyed by (seed, stream, block), so a path's
increments and jump time depend only on the seed, its index and the grid,
never on how blocks are scheduled across threads.

The pre-jump chain X^0 and every post-jump branch X^1(t_j) consume the same
increment array. Branch j coincides with X^0 strictly before t_j and receives
the beta kick when the recursion reaches t_j.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union
import os
import numpy as np
import pandas as pd
from .config import DEFAULT_VALUES
from .model import JumpModel, ProblemSpec, sample_tau
from .prometheus_metrics import observe_stage_duration, update_paths_simulated
from .timegrid import TimeGrid

logger = logging.getLogger(__name__)

BROWNIAN_STREAM = 0
JUMP_STREAM = 1


class NonFiniteStateError(Exception):
    """Exception raised when an Euler step produces a non-finite state."""

    def __init__(self, step: int, path: int, state: float, chain: str = "zero"):
        super().__init__(
            f"Non-finite state {state} on {chain} chain at step {step}, path {path}"
        )
        self.step = step
        self.path = path
        self.state = state
        self.chain = chain


class BundleMismatchError(ValueError):
    """Exception raised when a path bundle does not match the grid it is used with."""


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Brownian increments dW[p, i-1] over (t_{i-1}, t_i] and jump times tau[p]."""

    grid: TimeGrid
    dw: np.ndarray
    tau: np.ndarray
    seed: int

    def __post_init__(self):
        if self.dw.ndim != 2 or self.dw.shape[1] != self.grid.n:
            raise BundleMismatchError(
                f"Increments of shape {self.dw.shape} do not fit a {self.grid.n}-step grid"
            )
        if self.tau.shape != (self.dw.shape[0],):
            raise BundleMismatchError("One jump time per path is required")
        self.dw.setflags(write=False)
        self.tau.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return int(self.dw.shape[0])

    def brownian(self) -> np.ndarray:
        """W at every grid date, shape (paths, n+1), W_0 = 0."""
        w = np.zeros((self.n_paths, self.grid.n + 1))
        np.cumsum(self.dw, axis=1, out=w[:, 1:])
        return w

    def jump_index(self) -> np.ndarray:
        """Index of pi(tau) per path, -1 when tau > T."""
        index = np.full(self.n_paths, -1, dtype=int)
        jumped = self.tau <= self.grid.T
        index[jumped] = self.grid.project_index(self.tau[jumped])
        return index

    def coarsen(self, grid: TimeGrid) -> "PathBundle":
        """Bundle on a coarser grid whose increments are sums of this bundle's increments."""
        positions = self.grid.indices_of(grid.points)
        if positions[0] != 0 or positions[-1] != self.grid.n:
            raise BundleMismatchError("Coarse grid must span the same horizon")
        dw = np.add.reduceat(self.dw, positions[:-1], axis=1)
        return PathBundle(grid=grid, dw=dw, tau=self.tau.copy(), seed=self.seed)


def _substream(seed: int, stream: int, block: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(stream, block))
    return np.random.Generator(np.random.Philox(sequence))


def simulate_bundle(
    grid: TimeGrid,
    jump: JumpModel,
    n_paths: int,
    seed: int,
    threads: int = DEFAULT_VALUES["threads"],
    block_size: int = DEFAULT_VALUES["path_block"],
) -> PathBundle:
    """
    Gaussian increments with variance dt_i and independent jump times.

    Fully determined by (seed, n_paths, grid, jump); ``threads`` only changes
    the wall time.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    start_time = time.time()
    sqrt_dt = np.sqrt(grid.dt)
    blocks = math.ceil(n_paths / block_size)

    def simulate_block(block: int) -> Tuple[np.ndarray, np.ndarray]:
        rows = min(block_size, n_paths - block * block_size)
        normals = _substream(seed, BROWNIAN_STREAM, block).standard_normal((rows, grid.n))
        uniforms = _substream(seed, JUMP_STREAM, block).random(rows)
        return normals * sqrt_dt, np.asarray(sample_tau(jump, uniforms), dtype=float)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(executor.map(simulate_block, range(blocks)))

    dw = np.concatenate([increments for increments, _ in results], axis=0)
    tau = np.concatenate([taus for _, taus in results])
    update_paths_simulated(grid.n, n_paths)
    observe_stage_duration("simulate", time.time() - start_time)
    logger.info(
        f"Simulated {n_paths} paths on {grid.n} steps (seed={seed}, "
        f"{int(np.sum(tau <= grid.T))} jumps before T)"
    )
    return PathBundle(grid=grid, dw=dw, tau=tau, seed=seed)


def _check_finite(values: np.ndarray, step: int, chain: str):
    finite = np.isfinite(values)
    if not finite.all():
        path = int(np.argmin(finite))
        raise NonFiniteStateError(step, path, float(values[path]), chain)


def _euler_step(spec: ProblemSpec, t: float, x: np.ndarray, dt: float, dw: np.ndarray):
    return x + spec.b(t, x) * dt + spec.sigma(t, x) * dw


def euler_x0(spec: ProblemSpec, grid: TimeGrid, bundle: PathBundle) -> np.ndarray:
    """Pre-jump Euler chain, shape (paths, n+1)."""
    if bundle.grid is not grid and not np.array_equal(bundle.grid.points, grid.points):
        raise BundleMismatchError("Bundle was simulated on another grid")
    chain = np.empty((bundle.n_paths, grid.n + 1))
    chain[:, 0] = spec.x0
    dt = grid.dt
    for i in range(1, grid.n + 1):
        chain[:, i] = _euler_step(
            spec, grid.points[i - 1], chain[:, i - 1], dt[i - 1], bundle.dw[:, i - 1]
        )
        _check_finite(chain[:, i], i, "zero")
    return chain


def _kicked_start(spec: ProblemSpec, grid: TimeGrid, x0_chain: np.ndarray, j: int):
    """X^1_{t_j}(t_j): the pre-jump Euler step to t_j plus the beta kick."""
    if j == 0:
        start = x0_chain[:, 0] + spec.beta(grid.points[0], x0_chain[:, 0])
    else:
        start = x0_chain[:, j] + spec.beta(grid.points[j - 1], x0_chain[:, j - 1])
    start = np.broadcast_to(start, x0_chain[:, 0].shape).astype(float)
    _check_finite(start, j, f"branch {j}")
    return start


def _euler_tail(
    spec: ProblemSpec, grid: TimeGrid, bundle: PathBundle, start: np.ndarray, j: int
) -> np.ndarray:
    tail = np.empty((bundle.n_paths, grid.n + 1 - j))
    tail[:, 0] = start
    dt = grid.dt
    for i in range(j + 1, grid.n + 1):
        col = i - j
        tail[:, col] = _euler_step(
            spec, grid.points[i - 1], tail[:, col - 1], dt[i - 1], bundle.dw[:, i - 1]
        )
        _check_finite(tail[:, col], i, f"branch {j}")
    return tail


def euler_x1(
    spec: ProblemSpec,
    grid: TimeGrid,
    bundle: PathBundle,
    j: int,
    x0_chain: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Branch chain X^1_{t_i}(t_j) for i = 0..n; equal to X^0 for i < j."""
    if not 0 <= j <= grid.n:
        raise ValueError(f"Branch index {j} outside 0..{grid.n}")
    if x0_chain is None:
        x0_chain = euler_x0(spec, grid, bundle)
    branch = np.empty_like(x0_chain)
    branch[:, :j] = x0_chain[:, :j]
    branch[:, j:] = _euler_tail(spec, grid, bundle, _kicked_start(spec, grid, x0_chain, j), j)
    return branch


@dataclass(eq=False)
class BranchEnsemble:
    """
    Pre-jump chain plus the n+1 post-jump branches of every path.

    Branch tails (i >= j) are either stored triangularly or recomputed on
    demand from the frozen pre-jump chain; both give bit-identical values.
    """

    spec: ProblemSpec
    grid: TimeGrid
    bundle: PathBundle
    x0_chain: np.ndarray
    tails: Optional[List[np.ndarray]] = None
    _selected: Optional[np.ndarray] = field(default=None, repr=False)

    def branch_start(self, j: int) -> np.ndarray:
        if self.tails is not None:
            return self.tails[j][:, 0]
        return _kicked_start(self.spec, self.grid, self.x0_chain, j)

    def branch_tail(self, j: int) -> np.ndarray:
        """X^1_{t_i}(t_j) for i = j..n, shape (paths, n+1-j)."""
        if not 0 <= j <= self.grid.n:
            raise ValueError(f"Branch index {j} outside 0..{self.grid.n}")
        if self.tails is not None:
            return self.tails[j]
        return _euler_tail(self.spec, self.grid, self.bundle, self.branch_start(j), j)

    def branch(self, j: int) -> np.ndarray:
        return np.concatenate([self.x0_chain[:, :j], self.branch_tail(j)], axis=1)

    def selected_chain(self) -> np.ndarray:
        """
        Per path, the branch at pi(tau) (pre-jump chain when tau > T).

        Computed in one pass over the grid; values before pi(tau) are the
        pre-jump chain.
        """
        if self._selected is not None:
            return self._selected
        spec, grid, x0 = self.spec, self.grid, self.x0_chain
        k = self.bundle.jump_index()
        selected = np.empty_like(x0)
        selected[:, 0] = np.where(k == 0, self.branch_start(0), x0[:, 0])
        dt = grid.dt
        for i in range(1, grid.n + 1):
            stepped = _euler_step(
                spec, grid.points[i - 1], selected[:, i - 1], dt[i - 1], self.bundle.dw[:, i - 1]
            )
            kicked = x0[:, i] + spec.beta(grid.points[i - 1], x0[:, i - 1])
            selected[:, i] = np.where(
                (k < 0) | (k > i), x0[:, i], np.where(k == i, kicked, stepped)
            )
            _check_finite(selected[:, i], i, "selected")
        selected.setflags(write=False)
        self._selected = selected
        return selected


def build_ensemble(
    spec: ProblemSpec, grid: TimeGrid, bundle: PathBundle, store_branches: bool = True
) -> BranchEnsemble:
    """Run euler_x0 and, when storing, every branch tail; freeze the result."""
    start_time = time.time()
    x0_chain = euler_x0(spec, grid, bundle)
    x0_chain.setflags(write=False)
    tails = None
    if store_branches:
        tails = []
        for j in range(grid.n + 1):
            tail = _euler_tail(spec, grid, bundle, _kicked_start(spec, grid, x0_chain, j), j)
            tail.setflags(write=False)
            tails.append(tail)
    observe_stage_duration("forward", time.time() - start_time)
    logger.debug(
        f"Forward ensemble built ({bundle.n_paths} paths, {grid.n} steps, "
        f"branches {'stored' if store_branches else 'lazy'})"
    )
    return BranchEnsemble(spec=spec, grid=grid, bundle=bundle, x0_chain=x0_chain, tails=tails)


def assemble_x(
    grid: TimeGrid, ensemble: BranchEnsemble, bundle: PathBundle, t: float
) -> np.ndarray:
    """X^pi_t = X^0_{pi(t)} 1_{t<tau} + X^1_{pi(t)}(pi(tau)) 1_{t>=tau}, per path."""
    if bundle is not ensemble.bundle:
        raise BundleMismatchError("Ensemble was built from another bundle")
    i = int(grid.project_index(t))
    return np.where(t < bundle.tau, ensemble.x0_chain[:, i], ensemble.selected_chain()[:, i])


def dump_paths(ensemble: BranchEnsemble, path: Union[str, os.PathLike]) -> pd.DataFrame:
    """
    Write the CSV ``path,branch,i,t,x`` (branch -1 is the pre-jump chain).

    Rows are path-major, branch-minor, then i.
    """
    grid = ensemble.grid
    n_paths, n_dates = ensemble.x0_chain.shape
    stacked = np.stack(
        [ensemble.x0_chain] + [ensemble.branch(j) for j in range(grid.n + 1)], axis=1
    )
    n_branches = stacked.shape[1]
    frame = pd.DataFrame(
        {
            "path": np.repeat(np.arange(n_paths), n_branches * n_dates),
            "branch": np.tile(np.repeat(np.arange(-1, n_branches - 1), n_dates), n_paths),
            "i": np.tile(np.arange(n_dates), n_paths * n_branches),
            "t": np.tile(grid.points, n_paths * n_branches),
            "x": stacked.reshape(-1),
        }
    )
    frame.to_csv(path, index=False)
    logger.info(f"Path dump written to {path} ({len(frame)} rows)")
    return frame
