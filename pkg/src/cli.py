"""Command-line entry point for the optimal control solver suite."""

import argparse
import functools
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

# Add src to Python path
sys.path.insert(0, str(Path(__file__).parent))

from dotenv import load_dotenv

from config import Config
from driver import (
    Problem,
    SolverSettings,
    ToleranceSchedule,
    run_adaptive_study,
    run_scaling_bench,
    run_single_level,
    run_uniform_study,
)
from fem import BoxTarget, DofMap
from linalg import set_strict_determinism, set_threads
from mesh import uniform_mesh
from ocp import (
    ProblemForm,
    Regularization,
    verify_cross_form,
    verify_schur_identity,
    verify_spectral_equivalence,
)
from utils.errors import ConfigurationError, OcpSolverError, ParameterError, create_solver_error
from utils.formatting import ReportFormatter

VERSION = "0.1.0"

EXIT_OK = 0
EXIT_SOLVER_FAILURE = 1
EXIT_CONFIG_ERROR = 2

SCHUR_IDENTITY_TOL = 1e-9
CROSS_FORM_TOL = 1e-6

load_dotenv()

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None) -> None:
    """Log to stderr and to logs/ocp_solvers.log (temp directory as fallback)."""
    level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    try:
        logs_dir = Path(__file__).parent.parent / "logs"
        logs_dir.mkdir(exist_ok=True)
    except OSError:
        logs_dir = Path(tempfile.gettempdir()) / "ocp_solvers_logs"
        logs_dir.mkdir(exist_ok=True)
        print(f"Warning: Using temp directory for logs: {logs_dir}", file=sys.stderr)

    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stderr),
            logging.FileHandler(logs_dir / "ocp_solvers.log"),
        ],
        force=True,
    )


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file (flags override its values)")
    common.add_argument("--dim", type=int, help="Spatial dimension 1, 2 or 3 (default: 3)")
    common.add_argument("--cells", type=int, help="Initial cells per axis (default: 16)")
    common.add_argument("--levels", type=int, help="Number of levels (default: 3)")
    common.add_argument("--refine", choices=["uniform", "adaptive"], help="Refinement (default: uniform)")
    common.add_argument("--form", choices=["primal", "schur", "saddle"], help="Problem form (default: primal)")
    common.add_argument("--reg", choices=["energy", "l2"], help="Regularization (default: energy)")
    common.add_argument("--rho", help="'adapted' (h^r) or 'constant:<value>' (default: adapted)")
    common.add_argument("--mesh-size", choices=["jacobian", "diameter"],
                        help="Element size used in rho = h^r (default: jacobian)")
    common.add_argument("--consistent-mass", action="store_true", default=None,
                        help="L2 regularization with consistent M_{1/rho} and inner solves")
    common.add_argument("--nested", action="store_true", default=None,
                        help="Nested iteration with prolongated initial guesses")
    common.add_argument("--alpha", type=float, help="Tolerance schedule alpha (default per refine mode)")
    common.add_argument("--beta", type=float, help="Tolerance schedule beta (default per refine mode)")
    common.add_argument("--theta", type=float, help="Doerfler bulk fraction (default: 0.5)")
    common.add_argument("--tol", type=float, help="Relative preconditioned residual reduction (default: 1e-6)")
    common.add_argument("--max-iters", type=int, help="Krylov iteration cap (default: 1000)")
    common.add_argument("--preconditioner", choices=["diag", "lumped"],
                        help="diag(M) or lump(M) (default: diag)")
    common.add_argument("--threads", help="Kernel thread cap; bench takes a list like 1,2,4,8")
    common.add_argument("--no-strict", action="store_true", default=None,
                        help="Let the dot-product reduction follow the thread count")
    common.add_argument("--seed", type=int, help="Random seed for verification vectors (default: 0)")
    common.add_argument("--big", action="store_true", default=None,
                        help="Allow uniform 3D studies with 4 or more levels")
    common.add_argument("--output", help="Write the report to this file instead of stdout")
    common.add_argument("--format", choices=["csv", "json"], help="Report format (default: csv)")
    common.add_argument("--no-time", action="store_true", default=None,
                        help="Zero time columns for reproducible output")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level (default: LOG_LEVEL env or INFO)")
    return common


def build_parser() -> argparse.ArgumentParser:
    """Parser with the solve, study, verify and bench subcommands."""
    parser = argparse.ArgumentParser(
        prog="ocp-solvers",
        description="Finite element solvers for elliptic tracking-type optimal control problems",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Uniform 3D study, energy regularization with rho = h^2
  python src/cli.py study --dim 3 --levels 3 --refine uniform --form primal --reg energy

  # Same hierarchy with nested iteration
  python src/cli.py study --dim 3 --levels 3 --nested --alpha 0.5 --beta 0.5

  # Adaptive study as JSON
  python src/cli.py study --refine adaptive --levels 8 --format json --output adaptive.json

  # Structural checks
  python src/cli.py verify --check schur-identity --dim 2 --levels 2
  python src/cli.py verify --check spectral --dim 2 --cells 8 --levels 1 --reg l2

  # Thread scaling of the level-2 solve
  python src/cli.py bench --levels 2 --threads 1,2,4,8
        """,
    )
    parser.add_argument("--version", action="version", version=f"ocp-solvers {VERSION}")
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="Solve a single level of the uniform hierarchy")
    sub.add_parser("study", parents=[common], help="Run a multilevel convergence study")
    verify = sub.add_parser("verify", parents=[common], help="Check structural identities")
    verify.add_argument("--check", required=True,
                        choices=["schur-identity", "spectral", "cross-form"],
                        help="Which property to verify")
    sub.add_parser("bench", parents=[common], help="Thread scaling benchmark of one level")
    return parser


def _single_threads(value: Optional[str]) -> Optional[int]:
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"--threads must be an integer here, got '{value}'")


def _thread_list(value: Optional[str]) -> List[int]:
    if value is None:
        return [1, 2, 4, 8]
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--threads must be a comma-separated list, got '{value}'")


def load_config(args: argparse.Namespace) -> Config:
    """Merge flags over the config file, environment and defaults."""
    threads = None if args.command == "bench" else _single_threads(args.threads)
    config = Config.from_cli_args(
        config_path=args.config,
        rho=args.rho,
        mesh__dim=args.dim,
        mesh__cells=args.cells,
        mesh__big=args.big,
        problem__form=args.form,
        problem__regularization=args.reg,
        problem__mesh_size=args.mesh_size,
        problem__lumped=False if args.consistent_mass else None,
        solver__rel_tol=args.tol,
        solver__max_iters=args.max_iters,
        solver__preconditioner=args.preconditioner,
        solver__threads=threads,
        solver__strict=False if args.no_strict else None,
        solver__seed=args.seed,
        study__levels=args.levels,
        study__refine=args.refine,
        study__nested=args.nested,
        study__alpha=args.alpha,
        study__beta=args.beta,
        study__theta=args.theta,
        output__path=args.output,
        output__format=args.format,
        output__no_time=args.no_time,
    )
    config.validate()
    return config


def build_problem(config: Config) -> Problem:
    p = config.problem
    reg = Regularization(
        kind=p.regularization,
        rho_mode=p.rho,
        value=p.rho_value,
        lumped=p.lumped,
        mesh_size=p.mesh_size,
    )
    target = BoxTarget.centered(config.mesh.dim, p.box_lower, p.box_upper)
    return Problem(form=ProblemForm(p.form), regularization=reg, target=target)


def build_settings(config: Config) -> SolverSettings:
    s = config.solver
    return SolverSettings(max_iters=s.max_iters, preconditioner=s.preconditioner, inner_tol=s.inner_tol)


def emit(text: str, config: Config) -> None:
    """Write the report to the configured file or stdout."""
    if config.output.path:
        Path(config.output.path).write_text(text)
        logger.info(f"Wrote report to {config.output.path}")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def echo_table(formatter: ReportFormatter, rows, config: Config) -> None:
    """Echo a plain-text table to stderr when the report went to a file."""
    if config.output.path and rows:
        print(formatter.format_table(rows), file=sys.stderr)


def handle_error(func):
    """Map errors of a command to exit codes and structured error output."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        formatter = ReportFormatter()
        try:
            return func(*args, **kwargs)
        except (ConfigurationError, ParameterError) as e:
            logger.error(f"Configuration error in {func.__name__}: {e}")
            print(json.dumps(formatter.format_error(e), indent=2), file=sys.stderr)
            return EXIT_CONFIG_ERROR
        except OcpSolverError as e:
            logger.error(f"Solver error in {func.__name__}: {e}")
            print(json.dumps(formatter.format_error(e), indent=2), file=sys.stderr)
            return EXIT_SOLVER_FAILURE
        except Exception as e:
            logger.error(f"Unexpected error in {func.__name__}: {e}", exc_info=True)
            structured = create_solver_error(e, {"command": func.__name__})
            print(json.dumps(formatter.format_error(structured), indent=2), file=sys.stderr)
            return EXIT_SOLVER_FAILURE

    return wrapper


def cmd_solve(config: Config) -> int:
    report = run_single_level(
        config.study.levels,
        build_problem(config),
        build_settings(config),
        rel_tol=config.solver.rel_tol,
        dim=config.mesh.dim,
        cells=config.mesh.cells,
        config=config.to_dict(),
    )
    formatter = ReportFormatter(no_time=config.output.no_time)
    emit(formatter.format_study(report, config.output.format), config)
    echo_table(formatter, formatter.study_rows(report), config)
    return EXIT_SOLVER_FAILURE if report.failed else EXIT_OK


def cmd_study(config: Config) -> int:
    schedule = ToleranceSchedule(**config.tolerance_parameters())
    kwargs = dict(
        nested=config.study.nested,
        problem=build_problem(config),
        schedule=schedule,
        settings=build_settings(config),
        dim=config.mesh.dim,
        cells=config.mesh.cells,
        config=config.to_dict(),
    )
    if config.study.refine == "adaptive":
        report = run_adaptive_study(config.study.levels, theta=config.study.theta, **kwargs)
    else:
        report = run_uniform_study(config.study.levels, **kwargs)
    formatter = ReportFormatter(no_time=config.output.no_time)
    emit(formatter.format_study(report, config.output.format), config)
    echo_table(formatter, formatter.study_rows(report), config)
    return EXIT_SOLVER_FAILURE if report.failed else EXIT_OK


def cmd_verify(config: Config, check: str) -> int:
    problem = build_problem(config)
    mesh = uniform_mesh(config.study.levels, config.mesh.cells, config.mesh.dim)
    dofmap = DofMap.from_mesh(mesh)

    if check == "schur-identity":
        reg = problem.regularization
        if reg.rho_mode.value == "constant":
            rho = reg.value
        else:
            rho = Regularization.balanced("energy", mesh, mesh_size=reg.mesh_size).value
        deviation = verify_schur_identity(mesh, dofmap, rho, seed=config.solver.seed,
                                          inner_tol=config.solver.inner_tol)
        result = {"check": check, "dofs": dofmap.n_free, "rho": rho, "max_deviation": deviation,
                  "threshold": SCHUR_IDENTITY_TOL, "passed": deviation <= SCHUR_IDENTITY_TOL}
    elif check == "spectral":
        report = verify_spectral_equivalence(mesh, dofmap, problem.regularization,
                                             inner_tol=config.solver.inner_tol)
        result = {"check": check, "dofs": dofmap.n_free, **report.as_dict()}
    else:
        outcome = verify_cross_form(mesh, dofmap, problem.regularization, problem.target,
                                    preconditioner=config.solver.preconditioner)
        worst = max(outcome["deviations"].values())
        result = {"check": check, "dofs": dofmap.n_free, **outcome, "threshold": CROSS_FORM_TOL,
                  "passed": worst <= CROSS_FORM_TOL}

    emit(json.dumps(result, indent=2), config)
    return EXIT_OK if result["passed"] else EXIT_SOLVER_FAILURE


def cmd_bench(config: Config, thread_counts: List[int]) -> int:
    rows = run_scaling_bench(
        config.study.levels,
        build_problem(config),
        thread_counts,
        build_settings(config),
        rel_tol=config.solver.rel_tol,
        dim=config.mesh.dim,
        cells=config.mesh.cells,
    )
    formatter = ReportFormatter(no_time=config.output.no_time)
    if config.output.format == "json":
        emit(formatter.format_bench_json(rows), config)
    else:
        emit(formatter.format_bench_csv(rows), config)
    echo_table(formatter, formatter.bench_rows(rows), config)
    return EXIT_OK


@handle_error
def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    config.log_configuration_source()
    set_strict_determinism(config.solver.strict)
    if config.solver.threads is not None:
        set_threads(config.solver.threads)

    if args.command == "solve":
        return cmd_solve(config)
    if args.command == "study":
        return cmd_study(config)
    if args.command == "verify":
        return cmd_verify(config, args.check)
    return cmd_bench(config, _thread_list(args.threads))


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns 0 on success, 1 on solver failure, 2 on configuration errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_CONFIG_ERROR

    configure_logging(args.log_level)
    code = run(args)
    if code == EXIT_CONFIG_ERROR:
        parser.print_usage(sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
