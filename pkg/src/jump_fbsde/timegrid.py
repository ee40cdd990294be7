"""
Discretization grid of the horizon [0, T].

A ``TimeGrid`` holds the ordered dates t_0 = 0 < t_1 < ... < t_n = T used by
every scheme, the projection t -> pi(t) onto the largest grid date not after
t, and the mesh |pi|. Schemes always read the per-step ``dt`` so non-uniform
grids are first-class.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple, Union
import numpy as np


class InvalidGridError(ValueError):
    """Exception raised when a grid violates its construction invariants."""


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Immutable, strictly increasing partition of [0, T] with mesh at most 1."""

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=float)
        if points.ndim != 1 or points.size < 2:
            raise InvalidGridError("A grid needs at least the two dates 0 and T")
        if points[0] != 0.0:
            raise InvalidGridError(f"First grid date must be 0, got {points[0]}")
        if not np.all(np.isfinite(points)):
            raise InvalidGridError("Grid dates must be finite")
        steps = np.diff(points)
        if np.any(steps <= 0.0):
            raise InvalidGridError("Grid dates must be strictly increasing")
        if steps.max() > 1.0:
            raise InvalidGridError(
                f"Grid mesh {steps.max()} exceeds 1, the standing assumption |pi| <= 1"
            )
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return int(self.points.size - 1)

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @property
    def dt(self) -> np.ndarray:
        """Step lengths dt_i = t_i - t_{i-1}, i = 1..n, stored at index i-1."""
        return np.diff(self.points)

    def mesh(self) -> float:
        return float(self.dt.max())

    def project(self, t: float) -> Tuple[float, int]:
        """Return (pi(t), i) with pi(t) = max{t_i : t_i <= t}."""
        index = int(self.project_index(t))
        return float(self.points[index]), index

    def project_index(self, t: Union[float, np.ndarray]) -> np.ndarray:
        """Vectorized index of pi(t); raises for any t outside [0, T]."""
        times = np.asarray(t, dtype=float)
        if np.any(times < 0.0) or np.any(times > self.T) or np.any(np.isnan(times)):
            raise InvalidGridError(f"Time outside [0, {self.T}]: {t}")
        return np.searchsorted(self.points, times, side="right") - 1

    def index_of(self, t: float) -> int:
        """Index of a date that belongs to the grid (up to rounding noise)."""
        index = int(np.argmin(np.abs(self.points - t)))
        if not np.isclose(self.points[index], t, rtol=0.0, atol=1e-12 * max(1.0, self.T)):
            raise InvalidGridError(f"{t} is not a date of the grid")
        return index

    def indices_of(self, times: Sequence[float]) -> np.ndarray:
        return np.array([self.index_of(float(t)) for t in times], dtype=int)

    def refine(self, factor: int) -> "TimeGrid":
        """Split every step into ``factor`` equal substeps; coarse dates stay exact."""
        if factor < 1:
            raise InvalidGridError(f"Refinement factor must be >= 1, got {factor}")
        if factor == 1:
            return self
        pieces = [
            np.linspace(left, right, factor + 1)[:-1]
            for left, right in zip(self.points[:-1], self.points[1:])
        ]
        return TimeGrid(np.concatenate(pieces + [self.points[-1:]]))


def build_uniform(T: float, n: int) -> TimeGrid:
    """Uniform grid t_i = i T / n."""
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidGridError(f"Step count must be a positive integer, got {n}")
    if not np.isfinite(T) or T <= 0:
        raise InvalidGridError(f"Horizon must be positive, got {T}")
    if T / n > 1.0:
        raise InvalidGridError(f"Mesh T/n = {T / n} exceeds 1")
    points = np.arange(n + 1, dtype=float) * T / n
    points[-1] = T
    return TimeGrid(points)


def from_points(points: Sequence[float]) -> TimeGrid:
    """Grid from an explicit list of dates."""
    return TimeGrid(np.asarray(points, dtype=float))


def project(grid: TimeGrid, t: float) -> Tuple[float, int]:
    return grid.project(t)


def mesh(grid: TimeGrid) -> float:
    return grid.mesh()
