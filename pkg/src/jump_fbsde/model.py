"""
Problem definition for a decoupled forward-backward SDE with a single jump.

A ``ProblemSpec`` bundles the forward coefficients (b, sigma, beta), the
terminal payoff g, the generator f, the initial state and horizon, the
generator kind and the user-declared constants of the standing assumptions.
A ``JumpModel`` describes the law of the jump time through a deterministic
hazard rate, so that the jump time is independent of the Brownian motion.

Coefficients are vectorized callables over numpy arrays and must be pure:
specs and jump models are shared read-only across worker threads.

Constants are declared, never inferred. ``validate_assumptions`` probes the
declared inequalities at random points and reports every falsified one; the
solver refuses to run on a failing report unless forced.

Quadratic generators are never stepped directly. ``effective_generator``
clamps the z-argument at the uniform Z-bound returned by
``truncation_bound`` and every backward scheme consumes that Lipschitz
generator.
"""

import enum
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Tuple
import numpy as np
from scipy import integrate, optimize
from .config import DEFAULT_VALUES
from .prometheus_metrics import update_validation_violations

logger = logging.getLogger(__name__)

Coefficient = Callable[[float, np.ndarray], np.ndarray]
Payoff = Callable[[np.ndarray], np.ndarray]
Generator = Callable[
    [float, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray
]


class MissingConstantsError(Exception):
    """Exception raised when a computation needs constants the problem does not declare."""


class AssumptionViolationError(Exception):
    """Exception raised when a validation report contains violations and the run is not forced."""


class GeneratorKind(str, enum.Enum):
    LIPSCHITZ = "lipschitz"
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class Constants:
    """Declared constants; ``None`` means not declared."""

    K: Optional[float] = None
    K_g: Optional[float] = None
    M_g: Optional[float] = None
    K_q: Optional[float] = None
    K_f: Optional[float] = None
    L_fz: Optional[float] = None
    L_a: Optional[float] = None
    K_a: Optional[float] = None

    def __post_init__(self):
        for item in fields(self):
            value = getattr(self, item.name)
            if value is not None and (not math.isfinite(value) or value < 0):
                raise ValueError(
                    f"Constant {item.name} must be nonnegative and finite, got {value}"
                )

    def require(self, *names: str) -> Tuple[float, ...]:
        missing = [name for name in names if getattr(self, name) is None]
        if missing:
            raise MissingConstantsError(
                f"Missing declared constants: {', '.join(missing)}"
            )
        return tuple(float(getattr(self, name)) for name in names)


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, initial condition, horizon, generator kind and declared constants."""

    b: Coefficient
    sigma: Coefficient
    beta: Coefficient
    g: Payoff
    f: Generator
    x0: float
    T: float
    generator_kind: GeneratorKind = GeneratorKind.LIPSCHITZ
    constants: Constants = field(default_factory=Constants)
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "generator_kind", GeneratorKind(self.generator_kind))
        if not math.isfinite(self.x0):
            raise ValueError(f"Initial condition must be finite, got {self.x0}")
        if not math.isfinite(self.T) or self.T < 0:
            raise ValueError(f"Horizon must be nonnegative and finite, got {self.T}")

    def lipschitz_y(self) -> Optional[float]:
        """Declared Lipschitz constant of the generator in y (K or K_f)."""
        if self.generator_kind is GeneratorKind.QUADRATIC:
            return self.constants.K_f
        return self.constants.K

    def with_constants(self, **changes: Optional[float]) -> "ProblemSpec":
        return replace(self, constants=replace(self.constants, **changes))


@dataclass(frozen=True)
class JumpModel:
    """
    Law of the jump time through a deterministic hazard rate.

    ``hazard`` maps times to rates in 1/time units, bounded by
    ``lambda_max``. When no closed forms are registered, the cumulative
    hazard is computed by quadrature and inverted by bisection on
    [0, horizon + 10 / lambda_max].
    """

    hazard: Callable[[np.ndarray], np.ndarray]
    lambda_max: float
    horizon: float
    cumulative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    inverse_cumulative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"

    @classmethod
    def constant(cls, rate: float, horizon: float) -> "JumpModel":
        if rate < 0:
            raise ValueError(f"Hazard rate must be nonnegative, got {rate}")

        def inverse(h: np.ndarray) -> np.ndarray:
            h = np.asarray(h, dtype=float)
            if rate == 0.0:
                return np.full(h.shape, np.inf)
            return h / rate

        return cls(
            hazard=lambda t: np.full(np.shape(t), float(rate)),
            lambda_max=float(rate),
            horizon=float(horizon),
            cumulative=lambda t: float(rate) * np.asarray(t, dtype=float),
            inverse_cumulative=inverse,
            name=f"constant({rate})",
        )

    @classmethod
    def piecewise_constant(
        cls, breakpoints: List[float], rates: List[float], horizon: float
    ) -> "JumpModel":
        """
        Hazard equal to ``rates[k]`` on [breakpoints[k], breakpoints[k+1]).

        ``breakpoints`` starts at 0; the last rate extends to infinity.
        """
        starts = np.asarray(breakpoints, dtype=float)
        levels = np.asarray(rates, dtype=float)
        if starts.size != levels.size or starts.size == 0 or starts[0] != 0.0:
            raise ValueError("Breakpoints must start at 0 and match the rates")
        if np.any(np.diff(starts) <= 0) or np.any(levels < 0):
            raise ValueError("Breakpoints must increase and rates be nonnegative")
        # cumulative hazard at each breakpoint
        knots = np.concatenate([[0.0], np.cumsum(levels[:-1] * np.diff(starts))])

        def hazard(t: np.ndarray) -> np.ndarray:
            index = np.searchsorted(starts, np.asarray(t, dtype=float), side="right") - 1
            return levels[np.clip(index, 0, None)]

        def cumulative(t: np.ndarray) -> np.ndarray:
            t = np.asarray(t, dtype=float)
            index = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, None)
            return knots[index] + levels[index] * (t - starts[index])

        def inverse(h: np.ndarray) -> np.ndarray:
            h = np.asarray(h, dtype=float)
            index = np.clip(np.searchsorted(knots, h, side="right") - 1, 0, None)
            rate = levels[index]
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = starts[index] + (h - knots[index]) / rate
            return np.where(rate > 0.0, tau, np.inf)

        return cls(
            hazard=hazard,
            lambda_max=float(levels.max()),
            horizon=float(horizon),
            cumulative=cumulative,
            inverse_cumulative=inverse,
            name="piecewise_constant",
        )

    def cumulative_hazard(self, t: np.ndarray) -> np.ndarray:
        if self.cumulative is not None:
            return np.asarray(self.cumulative(t), dtype=float)
        times = np.atleast_1d(np.asarray(t, dtype=float))
        values = np.array(
            [
                integrate.quad(lambda s: float(self.hazard(np.asarray(s))), 0.0, u)[0]
                for u in times.ravel()
            ]
        ).reshape(times.shape)
        return values if np.ndim(t) else values[0]

    def survival(self, t: np.ndarray) -> np.ndarray:
        return np.exp(-self.cumulative_hazard(t))

    def density(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self.hazard(theta), dtype=float) * self.survival(theta)

    def inverse_cumulative_hazard(self, h: np.ndarray) -> np.ndarray:
        """Lambda^{-1}(h); ``inf`` when the hazard mass never reaches h."""
        if self.inverse_cumulative is not None:
            return np.asarray(self.inverse_cumulative(h), dtype=float)
        levels = np.atleast_1d(np.asarray(h, dtype=float))
        if self.lambda_max <= 0.0:
            return np.full(levels.shape, np.inf) if np.ndim(h) else np.inf
        upper = self.horizon + 10.0 / self.lambda_max
        mass = float(self.cumulative_hazard(upper))
        result = np.empty(levels.shape)
        for k, level in enumerate(levels.ravel()):
            if not np.isfinite(level) or level > mass:
                result.flat[k] = np.inf
            elif level <= 0.0:
                result.flat[k] = 0.0
            else:
                result.flat[k] = optimize.bisect(
                    lambda s: float(self.cumulative_hazard(s)) - level,
                    0.0,
                    upper,
                    xtol=DEFAULT_VALUES["bisection_tol"],
                )
        return result if np.ndim(h) else float(result[0])


def sample_tau(model: JumpModel, u: np.ndarray) -> np.ndarray:
    """
    Inverse-transform sample of the jump time, tau = Lambda^{-1}(-ln(1 - u)).

    Paths without enough hazard mass get ``inf``, the "no jump before T"
    sentinel.
    """
    levels = -np.log1p(-np.asarray(u, dtype=float))
    return model.inverse_cumulative_hazard(levels)


def truncate_z(z: np.ndarray, M: float) -> np.ndarray:
    """phi_M(z): identity on [-M, M], M z / |z| outside."""
    if M < 0:
        raise ValueError(f"Truncation level must be nonnegative, got {M}")
    return np.clip(z, -M, M)


def gradient_bounds(spec: ProblemSpec) -> Dict[str, float]:
    """Uniform gradient bounds of the forward and post-jump backward flows."""
    L_a, K_f, K_g = spec.constants.require("L_a", "K_f", "K_g")
    T = spec.T
    forward = math.exp(L_a * T)
    return {
        "grad_x0": forward,
        "grad_x1_start": forward,
        "grad_x1_initial": (1.0 + L_a * forward) * forward,
        "grad_y1": math.exp((L_a + K_f) * T) * (K_g + T * K_f),
    }


def z_bounds(spec: ProblemSpec) -> Tuple[float, float]:
    """Uniform bounds (post-jump, pre-jump) on |Z| for the quadratic kind."""
    if spec.generator_kind is not GeneratorKind.QUADRATIC:
        raise MissingConstantsError("Z-bounds are only defined for the quadratic kind")
    L_a, K_f, K_a = spec.constants.require("L_a", "K_f", "K_a")
    gradients = gradient_bounds(spec)
    T = spec.T
    post_jump = gradients["grad_y1"] * gradients["grad_x0"] * K_a
    # (1 + L_a e^{L_a T}) recovered from the initial-state gradient of X^1
    kick_growth = gradients["grad_x1_initial"] / gradients["grad_x0"]
    pre_jump = (
        gradients["grad_y1"]
        * math.exp((K_f + L_a) * T)
        * (1.0 + T * K_f * math.exp(K_f * T) * kick_growth)
        * K_a
    )
    return post_jump, pre_jump


def truncation_bound(spec: ProblemSpec) -> float:
    return max(z_bounds(spec))


def a_priori_y_bound(spec: ProblemSpec) -> float:
    """e^{KT}(K + KT), the Lipschitz-kind bound on |Y|."""
    (K,) = spec.constants.require("K")
    return math.exp(K * spec.T) * (K + K * spec.T)


def effective_generator(spec: ProblemSpec) -> Generator:
    """Generator consumed by the backward schemes (z-truncated for the quadratic kind)."""
    if spec.generator_kind is GeneratorKind.LIPSCHITZ:
        return spec.f
    post_jump, pre_jump = z_bounds(spec)
    M = max(post_jump, pre_jump)
    f = spec.f
    gradients = ", ".join(f"{key}={value:.6g}" for key, value in gradient_bounds(spec).items())
    logger.debug(
        f"Quadratic generator truncated at M={M:.6g} for {spec.name} "
        f"(post-jump {post_jump:.6g}, pre-jump {pre_jump:.6g}; gradient bounds {gradients})"
    )

    def truncated(t, x, y, z, u):
        return f(t, x, y, truncate_z(z, M), u)

    return truncated


# ---------------------------------------------------------------------------
# Assumption probing


@dataclass
class Violation:
    """One falsified inequality, with the worst sampled witness."""

    assumption: str
    inequality: str
    lhs: float
    rhs: float
    sample: Dict[str, float]


@dataclass
class ValidationReport:
    probe_count: int
    violations: List[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def ensure_passed(self):
        if self.violations:
            summary = "; ".join(
                f"{v.assumption}: {v.inequality}" for v in self.violations
            )
            raise AssumptionViolationError(f"Assumption probing failed: {summary}")

    def merge(self, other: "ValidationReport") -> "ValidationReport":
        return ValidationReport(
            probe_count=self.probe_count + other.probe_count,
            violations=self.violations + other.violations,
        )


class _Prober:
    """Collects the worst witness of each checked inequality."""

    def __init__(self, samples: Dict[str, np.ndarray], factor: float):
        self.samples = samples
        self.factor = factor
        self.violations: List[Violation] = []

    def check(self, assumption: str, inequality: str, lhs, rhs):
        lhs = np.broadcast_to(np.asarray(lhs, dtype=float), self._shape())
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), self._shape())
        failing = ~(lhs <= rhs * self.factor)
        if not np.any(failing):
            return
        excess = np.where(failing, np.nan_to_num(lhs - rhs, nan=np.inf), -np.inf)
        worst = int(np.argmax(excess))
        sample = {name: float(values[worst]) for name, values in self.samples.items()}
        self.violations.append(
            Violation(assumption, inequality, float(lhs[worst]), float(rhs[worst]), sample)
        )
        update_validation_violations(assumption)

    def missing(self, assumption: str, error: MissingConstantsError):
        self.violations.append(Violation(assumption, str(error), math.nan, math.nan, {}))
        update_validation_violations(assumption)

    def _shape(self):
        return next(iter(self.samples.values())).shape


def _probe_samples(spec: ProblemSpec, probe_count: int, rng_seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    span = DEFAULT_VALUES["probe_range"]
    samples = {
        "t": rng.uniform(0.0, spec.T, probe_count),
        "t_prime": rng.uniform(0.0, spec.T, probe_count),
    }
    for name in ("x", "x_prime", "y", "y_prime", "z", "z_prime", "u", "u_prime"):
        samples[name] = rng.uniform(-span, span, probe_count)
    return samples


def _pointwise(function, *columns):
    """Evaluate a coefficient pointwise on probe columns (t varies per sample)."""
    return np.array([float(np.asarray(function(*row))) for row in zip(*columns)])


def validate_assumptions(
    spec: ProblemSpec,
    probe_count: int = DEFAULT_VALUES["probe_count"],
    rng_seed: int = 0,
    jump: Optional[JumpModel] = None,
) -> ValidationReport:
    """
    Falsification probe of the declared inequalities of the active assumption set.

    Forward (growth, x-Lipschitz, time regularity) checks always run with K;
    backward checks use K for the Lipschitz kind and (M_g, K_g, K_q, K_f,
    L_fz, L_a, K_a) for the quadratic kind.
    """
    s = _probe_samples(spec, probe_count, rng_seed)
    prober = _Prober(s, DEFAULT_VALUES["probe_factor"])
    t, tp, x, xp = s["t"], s["t_prime"], s["x"], s["x_prime"]
    y, yp, z, zp, u, up = s["y"], s["y_prime"], s["z"], s["z_prime"], s["u"], s["u_prime"]
    zeros = np.zeros_like(x)
    dt_half = np.sqrt(np.abs(t - tp))

    b = lambda tt, xx: _pointwise(spec.b, tt, xx)
    sig = lambda tt, xx: _pointwise(spec.sigma, tt, xx)
    beta = lambda tt, xx: _pointwise(spec.beta, tt, xx)
    g = lambda xx: np.asarray(spec.g(xx), dtype=float)
    f = lambda tt, xx, yy, zz, uu: _pointwise(spec.f, tt, xx, yy, zz, uu)

    try:
        (K,) = spec.constants.require("K")
        prober.check(
            "forward_lipschitz", "|b(t,0)|+|sigma(t,0)|+|beta(t,0)| <= K",
            np.abs(b(t, zeros)) + np.abs(sig(t, zeros)) + np.abs(beta(t, zeros)), K,
        )
        prober.check(
            "forward_lipschitz", "|b(t,x)-b(t,x')|+|sigma(t,x)-sigma(t,x')|+|beta(t,x)-beta(t,x')| <= K|x-x'|",
            np.abs(b(t, x) - b(t, xp)) + np.abs(sig(t, x) - sig(t, xp))
            + np.abs(beta(t, x) - beta(t, xp)),
            K * np.abs(x - xp),
        )
        prober.check(
            "forward_time_regularity", "|b(t,x)-b(t',x)|+|sigma(t,x)-sigma(t',x)| <= K|t-t'|^(1/2)",
            np.abs(b(t, x) - b(tp, x)) + np.abs(sig(t, x) - sig(tp, x)), K * dt_half,
        )
        prober.check(
            "forward_time_regularity", "|beta(t,x)-beta(t',x)| <= K|t-t'|",
            np.abs(beta(t, x) - beta(tp, x)), K * np.abs(t - tp),
        )
    except MissingConstantsError as e:
        prober.missing("forward_lipschitz", e)

    if spec.generator_kind is GeneratorKind.LIPSCHITZ:
        try:
            (K,) = spec.constants.require("K")
            prober.check(
                "generator_lipschitz", "|f(t,x,0,0,0)|+|g(x)| <= K",
                np.abs(f(t, x, zeros, zeros, zeros)) + np.abs(g(x)), K,
            )
            prober.check(
                "generator_lipschitz", "|f(t,x,y,z,u)-f(t,x,y',z',u')| <= K(|y-y'|+|z-z'|+|u-u'|)",
                np.abs(f(t, x, y, z, u) - f(t, x, yp, zp, up)),
                K * (np.abs(y - yp) + np.abs(z - zp) + np.abs(u - up)),
            )
            prober.check(
                "generator_regularity", "|g(x)-g(x')|+|f(t,x,y,z,u)-f(t',x',y,z,u)| <= K(|x-x'|+|t-t'|^(1/2))",
                np.abs(g(x) - g(xp)) + np.abs(f(t, x, y, z, u) - f(tp, xp, y, z, u)),
                K * (np.abs(x - xp) + dt_half),
            )
        except MissingConstantsError as e:
            prober.missing("generator_lipschitz", e)
    else:
        try:
            M_g, K_g, K_q = spec.constants.require("M_g", "K_g", "K_q")
            prober.check("quadratic_growth", "|g(x)| <= M_g", np.abs(g(x)), M_g)
            prober.check("quadratic_growth", "|g(x)-g(x')| <= K_g|x-x'|", np.abs(g(x) - g(xp)), K_g * np.abs(x - xp))
            prober.check(
                "quadratic_growth", "|f(t,x,y,z,u)-f(t,x,y',z,u)| <= K_q|y-y'|",
                np.abs(f(t, x, y, z, u) - f(t, x, yp, z, u)), K_q * np.abs(y - yp),
            )
            prober.check(
                "quadratic_growth", "|f(t,x,y,z,u)| <= K_q(1+|y|+|z|^2+|u|)",
                np.abs(f(t, x, y, z, u)), K_q * (1.0 + np.abs(y) + z**2 + np.abs(u)),
            )
        except MissingConstantsError as e:
            prober.missing("quadratic_growth", e)
        try:
            K_f, L_fz = spec.constants.require("K_f", "L_fz")
            prober.check(
                "quadratic_regularity",
                "|f-f'| <= K_f(|x-x'|+|y-y'|+|u-u'|+|t-t'|^(1/2)) + L_fz(1+|z|+|z'|)|z-z'|",
                np.abs(f(t, x, y, z, u) - f(tp, xp, yp, zp, up)),
                K_f * (np.abs(x - xp) + np.abs(y - yp) + np.abs(u - up) + dt_half)
                + L_fz * (1.0 + np.abs(z) + np.abs(zp)) * np.abs(z - zp),
            )
        except MissingConstantsError as e:
            prober.missing("quadratic_regularity", e)
        try:
            L_a, K_a = spec.constants.require("L_a", "K_a")
            prober.check("quadratic_growth", "|b(t,x)-b(t,x')| <= L_a|x-x'|", np.abs(b(t, x) - b(t, xp)), L_a * np.abs(x - xp))
            prober.check("quadratic_growth", "sigma(t,x) = sigma(t,0)", np.abs(sig(t, x) - sig(t, zeros)), 0.0)
            prober.check("quadratic_growth", "|sigma(t)| <= K_a", np.abs(sig(t, zeros)), K_a)
        except MissingConstantsError as e:
            prober.missing("quadratic_growth", e)

    report = ValidationReport(probe_count=probe_count, violations=prober.violations)
    if jump is not None:
        report = report.merge(validate_jump_model(jump, probe_count, rng_seed))
    if report.passed:
        logger.info(f"Assumption probing passed for {spec.name} ({probe_count} probes)")
    else:
        logger.warning(
            {
                "message": "Assumption probing found violations",
                "problem": spec.name,
                "violations": [f"{v.assumption}: {v.inequality}" for v in report.violations],
            }
        )
    return report


def validate_jump_model(
    jump: JumpModel, probe_count: int = DEFAULT_VALUES["probe_count"], rng_seed: int = 0
) -> ValidationReport:
    """Probe 0 <= lambda <= lambda_max and the density mass identity on [0, horizon]."""
    rng = np.random.default_rng(rng_seed + 1)
    times = rng.uniform(0.0, jump.horizon, probe_count)
    prober = _Prober({"t": times}, DEFAULT_VALUES["probe_factor"])
    rates = np.asarray(jump.hazard(times), dtype=float)
    prober.check("bounded_intensity", "lambda(t) >= 0", -rates, 0.0)
    prober.check("bounded_intensity", "lambda(t) <= lambda_max", rates, jump.lambda_max)
    mass = integrate.quad(lambda s: float(jump.density(np.asarray(s))), 0.0, jump.horizon)[0]
    expected = 1.0 - float(jump.survival(jump.horizon))
    if not math.isclose(mass, expected, rel_tol=1e-6, abs_tol=1e-9):
        prober.violations.append(
            Violation(
                "DH", "integral of gamma on [0,T] = 1 - S(T)", mass, expected,
                {"horizon": jump.horizon},
            )
        )
        update_validation_violations("DH")
    return ValidationReport(probe_count=probe_count, violations=prober.violations)
