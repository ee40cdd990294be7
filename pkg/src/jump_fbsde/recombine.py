"""
Global discrete-time solution assembled from the pre-jump and branch components.

    Y_t = Y^0_{pi(t)} 1_{t<tau}  + Y^1_{pi(t)}(pi(tau)) 1_{t>=tau}
    Z_t = Z^0_{pi(t)} 1_{t<=tau} + Z^1_{pi(t)}(pi(tau)) 1_{t>tau}
    U_t = (Y^1_{pi(t)}(pi(t)) - Y^0_{pi(t)}) 1_{t<=tau}

tau is compared exactly; it is only projected to pick the branch. Values are
piecewise constant between grid dates.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union
import numpy as np
from .backward import BranchBackward, ZeroBackward
from .forward import BranchEnsemble, PathBundle
from .timegrid import TimeGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GridValues:
    """X, Y, Z, U per path (rows) on a set of dates (columns)."""

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray


@dataclass(eq=False)
class GlobalSolution:
    """
    Read-only handle over one solved run.

    ``zero`` and ``branches`` are ``None`` for forward-only runs, in which
    case Y, Z and U evaluate to NaN.
    """

    grid: TimeGrid
    bundle: PathBundle
    ensemble: BranchEnsemble
    zero: Optional[ZeroBackward] = None
    branches: Optional[BranchBackward] = None
    logger: Optional[logging.Logger] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.logger = self.logger or logger

    @property
    def tau(self) -> np.ndarray:
        return self.bundle.tau

    @property
    def diagonal(self) -> Optional[np.ndarray]:
        return None if self.zero is None else self.zero.diagonal

    @property
    def initial_value(self) -> float:
        if self.zero is None:
            self.logger.error("Initial value requested from a forward-only run")
            raise ValueError("Forward-only run has no backward component")
        return self.zero.initial_value

    def evaluate(
        self, t: float, path: Optional[Union[int, np.ndarray]] = None
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(X, Y, Z, U) at time t for every path, or the selected ``path`` rows."""
        i = int(self.grid.project_index(t))
        rows = slice(None) if path is None else path
        tau = self.tau[rows]
        before = t < tau
        x = np.where(
            before, self.ensemble.x0_chain[rows, i], self.ensemble.selected_chain()[rows, i]
        )
        if self.zero is None:
            missing = np.full(np.shape(x), np.nan)
            return x, missing, missing.copy(), missing.copy()
        y0 = self.zero.y[rows, i]
        y = np.where(before, y0, self.branches.selected_y[rows, i])
        z = np.where(t <= tau, self.zero.z[rows, i], self.branches.selected_z[rows, i])
        u = np.where(t <= tau, self.zero.diagonal[rows, i] - y0, 0.0)
        return x, y, z, u

    def on_dates(self, times: Sequence[float]) -> GridValues:
        times = np.asarray(times, dtype=float)
        columns = [self.evaluate(float(t)) for t in times]
        self.logger.debug(f"Evaluated {len(times)} date(s) on {self.bundle.n_paths} paths")
        return GridValues(
            times=times,
            x=np.column_stack([c[0] for c in columns]),
            y=np.column_stack([c[1] for c in columns]),
            z=np.column_stack([c[2] for c in columns]),
            u=np.column_stack([c[3] for c in columns]),
        )

    def on_grid(self) -> GridValues:
        return self.on_dates(self.grid.points)


def evaluate(
    sol: GlobalSolution, t: float, path: Optional[Union[int, np.ndarray]] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return sol.evaluate(t, path)
