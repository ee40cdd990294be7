"""
Command-line entry point.

Modes:
    single    one run at --n steps, prints Y0 and the error report
    converge  convergence ladder over --n-list, writes the table CSV
    dump      one run with full stores, writes the path and solution CSVs

Exit codes: 0 success, 1 validation failure, 2 numerical failure, 64 usage.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence
from prometheus_client import start_http_server
from .backward import NonConvergence, UnsolvedBranchError, dump_solution
from .condexp import BasisSpec, RegressionError
from .config import DEFAULT_VALUES, InvalidConfigArguments, read_config_file
from .forward import NonFiniteStateError, dump_paths, simulate_bundle
from .harness import (
    ClosedFormReference,
    ConvergenceRow,
    ConvergenceTable,
    FineGridReference,
    PathMismatchError,
    convergence_study,
    error_metrics,
    run_pipeline,
)
from .model import (
    AssumptionViolationError,
    MissingConstantsError,
    validate_assumptions,
)
from .problems import BuiltinProblem, UnknownProblemError, build_problem
from .timegrid import InvalidGridError, build_uniform

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_USAGE = 64

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(Exception):
    """Exception raised for unknown flags, malformed flag values or a missing config."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jump-fbsde", description="Discrete-time solver for FBSDEs with a single jump")
    parser.add_argument("--config", type=Path, help="problem config file (key = value lines)")
    parser.add_argument("--mode", choices=("single", "converge", "dump"), default="single")
    parser.add_argument("--n", type=int, help="step count (single and dump modes)")
    parser.add_argument("--n-list", help="comma-separated increasing step counts")
    parser.add_argument("--paths", type=int, default=DEFAULT_VALUES["n_paths"])
    parser.add_argument("--basis-degree", type=int, default=DEFAULT_VALUES["basis_degree"])
    parser.add_argument("--basis", default="poly", help="poly, poly:<degree> or local:<cells>")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--reference", help="closed or fine:<factor>")
    parser.add_argument("--force", action="store_true", help="run past a failing validation")
    parser.add_argument("--threads", type=int, default=DEFAULT_VALUES["threads"])
    parser.add_argument("--forward-only", action="store_true")
    parser.add_argument("--record-runtime", action="store_true")
    parser.add_argument("--metrics-port", type=int)
    parser.add_argument(
        "--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR")
    )
    return parser


def _parse_reference(text: Optional[str], problem: BuiltinProblem):
    if text is None:
        if problem.closed_form is not None:
            return "closed", 1
        return "fine", DEFAULT_VALUES["fine_factor"]
    kind, _, value = text.partition(":")
    if kind == "closed" and not value:
        return "closed", 1
    if kind == "fine":
        try:
            factor = int(value) if value else DEFAULT_VALUES["fine_factor"]
        except ValueError as e:
            raise UsageError(f"Invalid refinement factor in --reference {text}") from e
        if factor < 1:
            raise UsageError(f"Refinement factor must be >= 1, got {factor}")
        return "fine", factor
    raise UsageError(f"Unknown reference {text!r}")


def _parse_n_list(text: Optional[str]) -> List[int]:
    if not text:
        raise UsageError("--mode converge needs --n-list")
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise UsageError(f"Invalid --n-list {text!r}") from e


def _validate(problem: BuiltinProblem, force: bool):
    report = validate_assumptions(problem.spec, jump=problem.jump)
    if report.passed:
        return
    for violation in report.violations:
        logger.warning(f"Assumption violation: {asdict(violation)}")
    if not force:
        report.ensure_passed()
    logger.warning(f"Running {problem.name} past {len(report.violations)} violation(s) (--force)")


def _run_single(problem: BuiltinProblem, args, basis: BasisSpec) -> int:
    n = args.n or problem.n_steps
    backend, factor = _parse_reference(args.reference, problem)
    grid = build_uniform(problem.spec.T, n)
    reference_grid = grid.refine(factor)
    master = simulate_bundle(reference_grid, problem.jump, args.paths, args.seed, args.threads)
    bundle = master.coarsen(grid) if factor > 1 else master
    if backend == "closed":
        reference = ClosedFormReference(problem, master)
    else:
        boosted = basis.enlarged(DEFAULT_VALUES["reference_degree_boost"]) if factor > 1 else basis
        reference = FineGridReference(
            run_pipeline(problem, reference_grid, master, boosted, args.threads, forward_only=args.forward_only)
        )
    sol = run_pipeline(problem, grid, bundle, basis, args.threads, forward_only=args.forward_only)
    report = error_metrics(sol, reference, problem.jump)
    if not args.forward_only:
        print(f"Y0 = {sol.initial_value:.12g}")
    for key, value in asdict(report).items():
        print(f"{key} = {value:.6g}" if isinstance(value, float) else f"{key} = {value}")
    if args.out:
        table = ConvergenceTable(problem=problem.name)
        table.rows.append(ConvergenceRow(n, grid.mesh(), report, 0.0, args.seed))
        table.to_csv(args.out)
    return EXIT_OK


def _run_converge(problem: BuiltinProblem, args, basis: BasisSpec) -> int:
    backend, factor = _parse_reference(args.reference, problem)
    table = convergence_study(
        problem,
        _parse_n_list(args.n_list),
        args.paths,
        basis,
        args.seed,
        reference=backend,
        factor=factor,
        threads=args.threads,
        record_runtime=args.record_runtime,
        forward_only=args.forward_only,
    )
    if args.out:
        table.to_csv(args.out)
    else:
        sys.stdout.write(table.to_csv())
    for metric, slope in table.slopes.items():
        print(f"slope {metric} = {slope:.4f}" if slope is not None else f"slope {metric} = skipped")
    return EXIT_OK


def _run_dump(problem: BuiltinProblem, args, basis: BasisSpec) -> int:
    if not args.out:
        raise UsageError("--mode dump needs --out")
    grid = build_uniform(problem.spec.T, args.n or problem.n_steps)
    bundle = simulate_bundle(grid, problem.jump, args.paths, args.seed, args.threads)
    sol = run_pipeline(problem, grid, bundle, basis, args.threads, keep="full", store_branches=True)
    out = Path(args.out)
    dump_paths(sol.ensemble, out)
    dump_solution(sol.zero, sol.branches, out.with_name(f"{out.stem}_solution{out.suffix or '.csv'}"))
    return EXIT_OK


MODES = {"single": _run_single, "converge": _run_converge, "dump": _run_dump}


def run_cli(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.config is None or not args.config.is_file():
            raise UsageError(f"Config file required, got {args.config}")
        basis = BasisSpec.parse(args.basis, degree=args.basis_degree)
    except (UsageError, ValueError) as e:
        parser.print_usage(sys.stderr)
        print(f"jump-fbsde: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    if args.metrics_port:
        start_http_server(args.metrics_port)
        logger.info(f"Metrics exposed on port {args.metrics_port}")

    try:
        problem = build_problem(read_config_file(args.config))
        _validate(problem, args.force)
        return MODES[args.mode](problem, args, basis)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"jump-fbsde: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (
        InvalidConfigArguments,
        UnknownProblemError,
        AssumptionViolationError,
        MissingConstantsError,
        InvalidGridError,
        PathMismatchError,
        ValueError,
    ) as e:
        logger.error(f"Validation failure: {e}")
        return EXIT_VALIDATION
    except (NonConvergence, NonFiniteStateError, RegressionError, UnsolvedBranchError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL


def main():
    sys.exit(run_cli(sys.argv[1:]))
