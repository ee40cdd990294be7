"""
One-step conditional expectations by least-squares regression on the Markov state.

Both Euler chains are Markov, so E[. | F_i] is a function of the current
scalar state. A fit projects per-path targets onto a small basis of that
state: global polynomials (default, standardized regressors) or the hat
functions of a uniform partition.

Fits go through ``numpy.linalg.lstsq`` (SVD), never the raw normal
equations. Rank-deficient designs fall back to the minimum-norm solution
and are flagged. ``fit_many`` shares one design matrix across the targets it is given.
"""

import enum
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Sequence, Tuple, Union
import numpy as np
from .config import DEFAULT_VALUES
from .model import ProblemSpec
from .prometheus_metrics import update_regression_fits
from .timegrid import TimeGrid

logger = logging.getLogger(__name__)


class RegressionError(Exception):
    """Exception raised when a regression cannot be set up (non-finite data, too few samples)."""


class BasisKind(str, enum.Enum):
    POLYNOMIAL = "polynomial"
    LOCAL = "local"


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis; always contains the constant function."""

    kind: BasisKind = BasisKind.POLYNOMIAL
    degree: int = DEFAULT_VALUES["basis_degree"]
    cells: int = DEFAULT_VALUES["local_cells"]
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", BasisKind(self.kind))
        if self.degree < 0:
            raise ValueError(f"Polynomial degree must be >= 0, got {self.degree}")
        if self.cells < 1:
            raise ValueError(f"Partition needs at least one cell, got {self.cells}")

    @property
    def size(self) -> int:
        if self.kind is BasisKind.POLYNOMIAL:
            return self.degree + 1
        return self.cells + 1

    @classmethod
    def parse(cls, text: str, degree: Optional[int] = None) -> "BasisSpec":
        """Parse ``poly``, ``poly:<degree>`` or ``local:<cells>``."""
        kind, _, value = text.partition(":")
        kind = kind.strip().lower()
        try:
            if kind in ("poly", "polynomial"):
                chosen = int(value) if value else degree
                if chosen is None:
                    chosen = DEFAULT_VALUES["basis_degree"]
                return cls(kind=BasisKind.POLYNOMIAL, degree=chosen)
            if kind == "local":
                cells = int(value) if value else DEFAULT_VALUES["local_cells"]
                return cls(kind=BasisKind.LOCAL, cells=cells)
        except ValueError as e:
            raise ValueError(f"Invalid basis description {text!r}") from e
        raise ValueError(f"Unknown basis kind {kind!r}")

    def enlarged(self, boost: int) -> "BasisSpec":
        """Richer basis of the same kind (more degrees or 2**boost times the cells)."""
        if self.kind is BasisKind.POLYNOMIAL:
            return BasisSpec(self.kind, self.degree + boost, self.cells, self.standardize)
        return BasisSpec(self.kind, self.degree, self.cells * 2**boost, self.standardize)


def _design(basis: BasisSpec, scaled: np.ndarray, lower: float, upper: float) -> np.ndarray:
    if basis.kind is BasisKind.POLYNOMIAL:
        return np.vander(scaled, basis.degree + 1, increasing=True)
    nodes = np.linspace(lower, upper, basis.cells + 1)
    width = nodes[1] - nodes[0]
    clipped = np.clip(scaled, lower, upper)
    return np.maximum(0.0, 1.0 - np.abs(clipped[:, None] - nodes[None, :]) / width)


@dataclass(frozen=True, eq=False)
class FittedConditional:
    """
    Immutable fitted function of the state.

    ``constant`` is set when the fit is a plain average: degenerate states
    (every path at the same point, as at t_0) or constant targets. It is
    then returned exactly at every state.
    """

    basis: BasisSpec
    coefficients: np.ndarray
    center: float
    scale: float
    lower: float
    upper: float
    residual_norm: float
    condition: float
    rank_deficient: bool = False
    constant: Optional[float] = None

    def __call__(self, state: Union[float, np.ndarray]) -> np.ndarray:
        states = np.asarray(state, dtype=float)
        if self.constant is not None:
            return np.full(states.shape, self.constant)
        scaled = (np.atleast_1d(states) - self.center) / self.scale
        values = _design(self.basis, scaled, self.lower, self.upper) @ self.coefficients
        return values.reshape(states.shape)


def fit_many(
    basis: BasisSpec,
    states: np.ndarray,
    targets: Sequence[np.ndarray],
    chain: str = "zero",
) -> List[FittedConditional]:
    """
    Least-squares fits of several targets on one shared design.

    Raises:
        RegressionError: if lengths differ, data are non-finite or the
            sample count is below ``min_samples_per_column`` times the
            basis size.
    """
    states = np.asarray(states, dtype=float)
    columns = np.column_stack([np.asarray(target, dtype=float) for target in targets])
    n_samples = states.shape[0]
    if states.ndim != 1 or columns.shape[0] != n_samples:
        raise RegressionError(
            f"States {states.shape} and targets {columns.shape} do not line up"
        )
    if n_samples < DEFAULT_VALUES["min_samples_per_column"] * basis.size:
        raise RegressionError(
            f"{n_samples} samples are too few for a basis of size {basis.size}"
        )
    if not (np.isfinite(states).all() and np.isfinite(columns).all()):
        raise RegressionError("Non-finite regression input")

    constant_targets = np.ptp(columns, axis=0) == 0.0
    if np.ptp(states) == 0.0:
        update_regression_fits(chain, columns.shape[1])
        return [
            _constant_fit(basis, float(np.mean(columns[:, k]))) for k in range(columns.shape[1])
        ]

    center, scale = (float(np.mean(states)), float(np.std(states))) if basis.standardize else (0.0, 1.0)
    scaled = (states - center) / scale
    lower, upper = float(scaled.min()), float(scaled.max())
    design = _design(basis, scaled, lower, upper)
    coefficients, _, rank, singular = np.linalg.lstsq(design, columns, rcond=None)
    rank_deficient = rank < design.shape[1]
    condition = float((singular[0] / singular[-1]) ** 2) if singular[-1] > 0 else np.inf
    residuals = np.sqrt(np.mean((design @ coefficients - columns) ** 2, axis=0))
    update_regression_fits(chain, columns.shape[1], rank_deficient=rank_deficient)
    if rank_deficient:
        logger.warning(
            f"Rank-deficient {chain} regression: rank {rank} of {design.shape[1]} columns"
        )
    elif condition > DEFAULT_VALUES["condition_warn"]:
        logger.warning(f"Ill-conditioned {chain} regression: condition {condition:.3e}")

    fits = []
    for k in range(columns.shape[1]):
        if constant_targets[k]:
            fits.append(_constant_fit(basis, float(columns[0, k])))
            continue
        fits.append(
            FittedConditional(
                basis=basis,
                coefficients=coefficients[:, k].copy(),
                center=center,
                scale=scale,
                lower=lower,
                upper=upper,
                residual_norm=float(residuals[k]),
                condition=condition,
                rank_deficient=bool(rank_deficient),
            )
        )
    return fits


def _constant_fit(basis: BasisSpec, value: float) -> FittedConditional:
    coefficients = np.zeros(basis.size)
    return FittedConditional(
        basis=basis,
        coefficients=coefficients,
        center=0.0,
        scale=1.0,
        lower=0.0,
        upper=1.0,
        residual_norm=0.0,
        condition=1.0,
        constant=value,
    )


def fit(basis: BasisSpec, states: np.ndarray, targets: np.ndarray, chain: str = "zero") -> FittedConditional:
    return fit_many(basis, states, [targets], chain)[0]


def evaluate(fitted: FittedConditional, state: Union[float, np.ndarray]) -> np.ndarray:
    return fitted(state)


class ConditionalExpectation(Protocol):
    """Backend interface for the one-step conditional expectations of the backward schemes."""

    def fit_many(
        self, states: np.ndarray, targets: Sequence[np.ndarray], chain: str
    ) -> List[Callable[[np.ndarray], np.ndarray]]:
        ...


@dataclass(frozen=True)
class RegressionBackend:
    """Least-squares backend; the only one that ships."""

    basis: BasisSpec = BasisSpec()

    def fit_many(
        self, states: np.ndarray, targets: Sequence[np.ndarray], chain: str
    ) -> List[FittedConditional]:
        return fit_many(self.basis, states, targets, chain)


def as_backend(basis: Union[BasisSpec, ConditionalExpectation]) -> ConditionalExpectation:
    if isinstance(basis, BasisSpec):
        return RegressionBackend(basis)
    return basis


def nested_mc_oracle(
    spec: ProblemSpec,
    grid: TimeGrid,
    state: float,
    i: int,
    payoff: Callable[[np.ndarray, np.ndarray], np.ndarray],
    inner_paths: int,
    seed: int,
) -> Tuple[float, float]:
    """
    Brute-force conditional expectation by resimulation from (t_i, state).

    ``payoff(x, dw)`` receives the sub-paths x of shape (inner_paths, n+1-i)
    (column 0 is ``state``) and their increments of shape (inner_paths, n-i).
    Post-jump branches follow the same Euler map after their kick, so the
    oracle serves both chains. Returns (mean, standard error).
    """
    if inner_paths < 1000:
        raise ValueError(f"inner_paths must be >= 1000, got {inner_paths}")
    if not 0 <= i <= grid.n:
        raise ValueError(f"Step {i} outside 0..{grid.n}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    dt = grid.dt[i:]
    dw = rng.standard_normal((inner_paths, grid.n - i)) * np.sqrt(dt)
    x = np.empty((inner_paths, grid.n - i + 1))
    x[:, 0] = state
    for k in range(1, grid.n - i + 1):
        t = grid.points[i + k - 1]
        x[:, k] = x[:, k - 1] + spec.b(t, x[:, k - 1]) * dt[k - 1] + spec.sigma(t, x[:, k - 1]) * dw[:, k - 1]
    values = np.broadcast_to(np.asarray(payoff(x, dw), dtype=float), (inner_paths,))
    update_regression_fits("oracle")
    mean = float(np.mean(values))
    standard_error = float(np.std(values, ddof=1) / np.sqrt(inner_paths))
    return mean, standard_error
