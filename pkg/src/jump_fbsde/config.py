import os
from typing import Dict, Union


class InvalidConfigArguments(Exception):
    """Custom exception for invalid problem configuration arguments."""


DEFAULT_VALUES = {
    "n_paths": int(os.getenv("JUMP_FBSDE_N_PATHS", "200000")),
    "basis_degree": int(os.getenv("JUMP_FBSDE_BASIS_DEGREE", "3")),
    "local_cells": int(os.getenv("JUMP_FBSDE_LOCAL_CELLS", "16")),
    "fine_factor": int(os.getenv("JUMP_FBSDE_FINE_FACTOR", "4")),
    "reference_degree_boost": int(os.getenv("JUMP_FBSDE_REFERENCE_DEGREE_BOOST", "1")),
    "picard_tol": float(os.getenv("JUMP_FBSDE_PICARD_TOL", "1e-12")),
    "picard_max_iter": int(os.getenv("JUMP_FBSDE_PICARD_MAX_ITER", "50")),
    "probe_count": int(os.getenv("JUMP_FBSDE_PROBE_COUNT", "2000")),
    "probe_factor": float(os.getenv("JUMP_FBSDE_PROBE_FACTOR", str(1.0 + 1e-9))),
    "probe_range": float(os.getenv("JUMP_FBSDE_PROBE_RANGE", "10")),
    "path_block": int(os.getenv("JUMP_FBSDE_PATH_BLOCK", "4096")),
    "threads": int(os.getenv("JUMP_FBSDE_THREADS", "1")),
    "slope_low": float(os.getenv("JUMP_FBSDE_SLOPE_LOW", "-1.5")),
    "slope_high": float(os.getenv("JUMP_FBSDE_SLOPE_HIGH", "-0.5")),
    "bisection_tol": float(os.getenv("JUMP_FBSDE_BISECTION_TOL", "1e-12")),
    "min_samples_per_column": int(os.getenv("JUMP_FBSDE_MIN_SAMPLES_PER_COLUMN", "10")),
    "condition_warn": float(os.getenv("JUMP_FBSDE_CONDITION_WARN", "1e10")),
}

# Prometheus Metric Names
METRIC_NAMES = {
    "fbsde_paths_simulated": os.getenv(
        "FBSDE_PATHS_SIMULATED_METRIC", "fbsde_paths_simulated"
    ),
    "fbsde_regression_fits": os.getenv(
        "FBSDE_REGRESSION_FITS_METRIC", "fbsde_regression_fits"
    ),
    "fbsde_rank_deficient_fits": os.getenv(
        "FBSDE_RANK_DEFICIENT_FITS_METRIC", "fbsde_rank_deficient_fits"
    ),
    "fbsde_validation_violations": os.getenv(
        "FBSDE_VALIDATION_VIOLATIONS_METRIC", "fbsde_validation_violations"
    ),
    "fbsde_picard_iterations": os.getenv(
        "FBSDE_PICARD_ITERATIONS_METRIC", "fbsde_picard_iterations"
    ),
    "fbsde_stage_duration_seconds": os.getenv(
        "FBSDE_STAGE_DURATION_METRIC", "fbsde_stage_duration_seconds"
    ),
    "fbsde_convergence_slope": os.getenv(
        "FBSDE_CONVERGENCE_SLOPE_METRIC", "fbsde_convergence_slope"
    ),
    "fbsde_initial_value": os.getenv(
        "FBSDE_INITIAL_VALUE_METRIC", "fbsde_initial_value"
    ),
}

# Config-file keys and how each value is parsed
CONFIG_KEY_TYPES = {
    "problem": str,
    "generator_kind": str,
    "T": float,
    "x0": float,
    "n_steps": int,
    "lambda_const": float,
    "beta_const": float,
    "K": float,
    "K_g": float,
    "K_q": float,
    "K_f": float,
    "L_fz": float,
    "L_a": float,
    "K_a": float,
    "M_g": float,
}
VALID_CONFIG_KEYS = set(CONFIG_KEY_TYPES.keys())

ConfigValue = Union[str, int, float]


def parse_config_text(text: str) -> Dict[str, ConfigValue]:
    """
    Parse ``key = value`` lines into a typed dictionary.

    Blank lines and ``#`` comments (full-line or trailing) are ignored. Every
    key must belong to ``VALID_CONFIG_KEYS``.

    Raises:
        InvalidConfigArguments: on unknown keys, malformed lines or values
            that do not parse to the key's type.
    """
    parsed: Dict[str, ConfigValue] = {}
    invalid_keys = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigArguments(
                f"Malformed config line {lineno}: {raw_line.strip()!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in VALID_CONFIG_KEYS:
            invalid_keys.add(key)
            continue
        try:
            parsed[key] = CONFIG_KEY_TYPES[key](value)
        except ValueError as e:
            raise InvalidConfigArguments(
                f"Invalid value for {key} on line {lineno}: {value!r}"
            ) from e
    if invalid_keys:
        raise InvalidConfigArguments(
            f"Invalid config arguments: {', '.join(sorted(invalid_keys))}"
        )
    return parsed


def read_config_file(path: Union[str, os.PathLike]) -> Dict[str, ConfigValue]:
    """Read and parse a problem config file."""
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config_text(handle.read())
