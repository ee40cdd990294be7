"""
Registry of builtin test problems.

Each problem carries its coefficients, a constant-hazard jump model, a
default step count and, when known, a closed-form solution evaluated on the
Brownian paths of a bundle. Config files select a problem by id and may
override its scalar parameters and declared constants.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Mapping, Optional
import numpy as np
from .config import ConfigValue, InvalidConfigArguments
from .model import Constants, GeneratorKind, JumpModel, ProblemSpec
from .recombine import GridValues

logger = logging.getLogger(__name__)

# (times, W on those times, tau) -> exact values
ClosedForm = Callable[[np.ndarray, np.ndarray, np.ndarray], GridValues]


class UnknownProblemError(KeyError):
    """Exception raised for a problem id without a registered builtin or closed form."""


@dataclass(frozen=True)
class BuiltinProblem:
    spec: ProblemSpec
    jump: JumpModel
    n_steps: int = 32
    closed_form: Optional[ClosedForm] = None

    @property
    def name(self) -> str:
        return self.spec.name


def _constant_coefficient(value: float):
    return lambda t, x: np.full(np.shape(x), value)


def _driftless(T: float, x0: float, rate: float, kick: float, n_steps: int, **constants) -> BuiltinProblem:
    """g(x) = x, b = 0, sigma = 1, beta = kick, f = rate * u."""

    def closed_form(times, w, tau):
        times = np.asarray(times, dtype=float)[None, :]
        tau = np.asarray(tau, dtype=float)[:, None]
        remaining = np.exp(-rate * (T - times))
        jumped = times >= tau
        diffusion = x0 + w
        return GridValues(
            times=times[0],
            x=diffusion + kick * jumped,
            y=np.where(jumped, diffusion + kick, diffusion + kick * (1.0 - remaining)),
            z=np.ones_like(diffusion),
            u=np.where(times <= tau, kick * remaining, 0.0) * np.ones_like(diffusion),
        )

    spec = ProblemSpec(
        b=_constant_coefficient(0.0),
        sigma=_constant_coefficient(1.0),
        beta=_constant_coefficient(kick),
        g=lambda x: np.asarray(x, dtype=float),
        f=lambda t, x, y, z, u: rate * u,
        x0=x0,
        T=T,
        constants=Constants(**{"K": max(1.0 + abs(kick), rate), **constants}),
        name="driftless",
    )
    return BuiltinProblem(spec, JumpModel.constant(rate, T), n_steps, closed_form)


def _linear_jump(T: float, x0: float, rate: float, kick: float, n_steps: int, **constants) -> BuiltinProblem:
    """g = 1, f = alpha y with alpha = 0.5, b = 0, sigma = 1, beta = kick."""
    alpha = 0.5

    def closed_form(times, w, tau):
        times = np.asarray(times, dtype=float)[None, :]
        tau = np.asarray(tau, dtype=float)[:, None]
        diffusion = x0 + w
        y = np.exp(alpha * (T - times)) * np.ones_like(diffusion)
        return GridValues(
            times=times[0],
            x=diffusion + kick * (times >= tau),
            y=y,
            z=np.zeros_like(diffusion),
            u=np.zeros_like(diffusion),
        )

    spec = ProblemSpec(
        b=_constant_coefficient(0.0),
        sigma=_constant_coefficient(1.0),
        beta=_constant_coefficient(kick),
        g=lambda x: np.ones(np.shape(x)),
        f=lambda t, x, y, z, u: alpha * y,
        x0=x0,
        T=T,
        constants=Constants(**{"K": max(1.0 + abs(kick), alpha), **constants}),
        name="linear_jump",
    )
    return BuiltinProblem(spec, JumpModel.constant(rate, T), n_steps, closed_form)


def _ou_lipschitz(T: float, x0: float, rate: float, kick: float, n_steps: int, **constants) -> BuiltinProblem:
    """Mean-reverting state with sine-modulated volatility and a bounded payoff."""
    spec = ProblemSpec(
        b=lambda t, x: -np.asarray(x, dtype=float),
        sigma=lambda t, x: 1.0 + 0.5 * np.sin(x),
        beta=_constant_coefficient(kick),
        g=np.tanh,
        f=lambda t, x, y, z, u: 0.2 * y + 0.1 * np.sin(z) + 0.3 * u,
        x0=x0,
        T=T,
        constants=Constants(**{"K": 1.5 + abs(kick), **constants}),
        name="ou_lipschitz",
    )
    return BuiltinProblem(spec, JumpModel.constant(rate, T), n_steps)


def _quadratic_toy(T: float, x0: float, rate: float, kick: float, n_steps: int, **constants) -> BuiltinProblem:
    """Quadratic-in-z generator with bounded Lipschitz payoff."""
    declared = {
        "K": 1.0 + abs(kick),
        "M_g": 1.0,
        "K_g": 1.0,
        "K_q": 0.5,
        "K_f": 0.2,
        "L_fz": 0.5,
        "L_a": 0.5,
        "K_a": 1.0,
    }
    declared.update(constants)
    spec = ProblemSpec(
        b=lambda t, x: -0.5 * np.asarray(x, dtype=float),
        sigma=_constant_coefficient(1.0),
        beta=_constant_coefficient(kick),
        g=np.tanh,
        f=lambda t, x, y, z, u: 0.5 * z**2 - 0.1 * y + 0.2 * u,
        x0=x0,
        T=T,
        generator_kind=GeneratorKind.QUADRATIC,
        constants=Constants(**declared),
        name="quadratic_toy",
    )
    return BuiltinProblem(spec, JumpModel.constant(rate, T), n_steps)


BUILTIN_PROBLEMS: Dict[str, Callable[..., BuiltinProblem]] = {
    "driftless": _driftless,
    "linear_jump": _linear_jump,
    "ou_lipschitz": _ou_lipschitz,
    "quadratic_toy": _quadratic_toy,
}

_CONSTANT_KEYS = ("K", "K_g", "M_g", "K_q", "K_f", "L_fz", "L_a", "K_a")


def build_problem(config: Mapping[str, ConfigValue]) -> BuiltinProblem:
    """
    Instantiate the builtin named by ``config["problem"]``.

    Recognized overrides: T (1.0), x0 (0.0), n_steps (32), lambda_const
    (1.0), beta_const (0.5), generator_kind and the declared constants.
    """
    if "problem" not in config:
        raise InvalidConfigArguments("Config must name a problem")
    name = str(config["problem"])
    if name not in BUILTIN_PROBLEMS:
        raise UnknownProblemError(
            f"Unknown problem {name!r}, expected one of {sorted(BUILTIN_PROBLEMS)}"
        )
    constants = {key: float(config[key]) for key in _CONSTANT_KEYS if key in config}
    try:
        problem = BUILTIN_PROBLEMS[name](
            T=float(config.get("T", 1.0)),
            x0=float(config.get("x0", 0.0)),
            rate=float(config.get("lambda_const", 1.0)),
            kick=float(config.get("beta_const", 0.5)),
            n_steps=int(config.get("n_steps", 32)),
            **constants,
        )
        if "generator_kind" in config:
            kind = GeneratorKind(str(config["generator_kind"]).lower())
            problem = replace(problem, spec=replace(problem.spec, generator_kind=kind))
    except ValueError as e:
        raise InvalidConfigArguments(f"Invalid parameters for {name}: {e}") from e
    logger.debug(f"Built problem {name} with overrides {dict(config)}")
    return problem


def get_problem(name: str, **overrides: ConfigValue) -> BuiltinProblem:
    return build_problem({"problem": name, **overrides})
