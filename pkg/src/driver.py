"""Multilevel studies: uniform and adaptive hierarchies, nested iteration, eoc and scaling."""

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from fem import (
    BoxTarget,
    DofMap,
    element_error_indicators,
    extend_vector,
    prolongate,
)
from linalg import KrylovReport, get_threads, set_threads
from mesh import (
    Mesh,
    Prolongation,
    build_unit_cube_mesh,
    mark_doerfler,
    refine_adaptive,
    refine_uniform,
    uniform_mesh,
)
from ocp import ProblemForm, Regularization, build_system, solve_system
from utils.errors import OcpSolverError, ParameterError, create_solver_error
from utils.validation import require_fraction, require_positive, require_positive_int

logger = logging.getLogger(__name__)

UNIFORM = "uniform"
ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class ToleranceSchedule:
    """Nested-iteration stopping rule alpha·(n_l/n_{l-1})^(-beta/3); base_tol on level 1."""

    alpha: float
    beta: float
    base_tol: float = 1e-6

    def __post_init__(self):
        require_fraction("alpha", self.alpha)
        require_positive("beta", self.beta)
        require_fraction("base_tol", self.base_tol, include_one=False)

    @classmethod
    def for_refinement(cls, refinement: str, base_tol: float = 1e-6) -> "ToleranceSchedule":
        if refinement == ADAPTIVE:
            return cls(alpha=0.25, beta=0.75, base_tol=base_tol)
        return cls(alpha=0.5, beta=0.5, base_tol=base_tol)


def tolerance_for_level(schedule: ToleranceSchedule, n_l: int, n_prev: Optional[int] = None) -> float:
    """Relative tolerance alpha * (n_l / n_prev)^(-beta / 3) of a nested level.

    Args:
        schedule: alpha, beta and the level-1 tolerance
        n_l: Dofs of the current level
        n_prev: Dofs of the previous level, None on level 1

    Returns:
        The base tolerance on level 1, the scheduled tolerance otherwise

    Raises:
        ParameterError: If n_l < n_prev or n_prev < 1
    """
    if n_prev is None:
        return schedule.base_tol
    if not n_l >= n_prev >= 1:
        raise ParameterError(f"Need n_l >= n_prev >= 1, got n_l={n_l}, n_prev={n_prev}")
    return schedule.alpha * (n_l / n_prev) ** (-schedule.beta / 3.0)


@dataclass(frozen=True)
class Problem:
    """What is solved on every level."""

    form: ProblemForm = ProblemForm.PRIMAL
    regularization: Regularization = field(default_factory=Regularization)
    target: Optional[BoxTarget] = None

    def target_for(self, dim: int) -> BoxTarget:
        return self.target or BoxTarget.centered(dim)


@dataclass(frozen=True)
class SolverSettings:
    max_iters: int = 1000
    preconditioner: str = "diag"
    inner_tol: float = 1e-10


@dataclass
class LevelRecord:
    level: int
    dofs: int
    free_dofs: int
    error: float
    eoc: Optional[float]
    iterations: int
    wall_time: float
    tol_used: float
    assembly_time: float = 0.0
    converged: bool = True


@dataclass
class StudyReport:
    refinement: str
    nested: bool
    dim: int
    records: List[LevelRecord] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    failed: bool = False
    failure: Optional[Dict[str, Any]] = None

    @property
    def mode(self) -> str:
        return f"{self.refinement}/{'nested' if self.nested else 'non-nested'}"

    @property
    def eoc_convention(self) -> str:
        if self.refinement == ADAPTIVE:
            return "d*log(e_prev/e)/log(n/n_prev)"
        return "log2(e_prev/e)"


@dataclass
class LevelSolution:
    mesh: Mesh
    dofmap: DofMap
    y: np.ndarray
    report: KrylovReport
    assembly_time: float
    tol: float


@dataclass
class BenchRecord:
    threads: int
    dofs: int
    iterations: int
    wall_time: float
    speedup: float
    checksum: str


def solve_level(mesh: Mesh, problem: Problem, settings: SolverSettings, tol: float,
                x0: Optional[np.ndarray] = None) -> LevelSolution:
    """Assemble and solve one level; only the Krylov solve is timed as solve time."""
    dofmap = DofMap.from_mesh(mesh)
    start = time.perf_counter()
    system = build_system(problem.form, mesh, dofmap, problem.regularization,
                          problem.target_for(mesh.dim), settings.inner_tol)
    assembly_time = time.perf_counter() - start
    y, report = solve_system(system, tol, settings.max_iters, settings.preconditioner, x0)
    return LevelSolution(mesh, dofmap, y, report, assembly_time, tol)


def compute_eoc(records: Sequence[LevelRecord], refinement: str = UNIFORM,
                dim: int = 3) -> List[LevelRecord]:
    """Fill eoc: log2 error ratios for uniform runs, dof-based rates for adaptive runs.

    Args:
        records: Level records in hierarchy order
        refinement: UNIFORM or ADAPTIVE
        dim: Space dimension d of the adaptive rate

    Returns:
        Copies of the records with eoc set; None where it is undefined
    """
    filled = []
    for i, record in enumerate(records):
        eoc = None
        if i > 0:
            prev = records[i - 1]
            if prev.error > 0 and record.error > 0:
                if refinement == ADAPTIVE:
                    if record.dofs != prev.dofs:
                        eoc = dim * math.log(prev.error / record.error) / math.log(
                            record.dofs / prev.dofs
                        )
                else:
                    eoc = math.log2(prev.error / record.error)
        filled.append(replace(record, eoc=eoc))
    return filled


def _fail(report: StudyReport, level: int, error: Exception) -> StudyReport:
    structured = create_solver_error(error, {"level": level})
    report.failed = True
    report.failure = structured.to_dict()
    logger.error(f"Study aborted at level {level}: {report.failure}")
    return report


def _not_converged(report: StudyReport, record: LevelRecord) -> None:
    report.failed = True
    report.failure = {
        "error_type": "NotConverged",
        "message": f"Krylov solve did not reach tolerance {record.tol_used:.3e} at level {record.level}",
        "error_source": "SOLVER",
        "error_code": "NOT_CONVERGED",
        "suggested_action": "Increase --max-iters or check the preconditioner.",
        "context": {"level": record.level, "iterations": record.iterations},
    }
    logger.error(f"Study aborted at level {record.level}: solver did not converge")


def _record(level: int, solution: LevelSolution, eta: np.ndarray) -> LevelRecord:
    error = float(np.sqrt(np.sum(eta**2)))
    return LevelRecord(
        level=level,
        dofs=solution.mesh.n_vertices,
        free_dofs=solution.dofmap.n_free,
        error=error,
        eoc=None,
        iterations=solution.report.iterations,
        wall_time=solution.report.wall_time,
        tol_used=solution.tol,
        assembly_time=solution.assembly_time,
        converged=solution.report.converged,
    )


def _run(refinement: str, levels: int, nested: bool, problem: Problem,
         schedule: ToleranceSchedule, settings: SolverSettings, dim: int, cells: int,
         theta: float, config: Optional[Dict[str, Any]]) -> StudyReport:
    require_positive_int("levels", levels)
    report = StudyReport(refinement=refinement, nested=nested, dim=dim, config=dict(config or {}))
    target = problem.target_for(dim)
    mesh = build_unit_cube_mesh(cells, dim)
    previous: Optional[LevelSolution] = None
    prolongation: Optional[Prolongation] = None

    logger.info(
        f"Starting {report.mode} study: d={dim}, {levels} levels, form={problem.form.value}, "
        f"{problem.regularization.describe()}"
    )
    for level in range(1, levels + 1):
        try:
            if nested and previous is not None:
                tol = tolerance_for_level(schedule, mesh.n_vertices, previous.mesh.n_vertices)
                x0 = prolongate(prolongation, previous.dofmap, DofMap.from_mesh(mesh), previous.y)
            else:
                tol, x0 = schedule.base_tol, None
            solution = solve_level(mesh, problem, settings, tol, x0)
            eta = element_error_indicators(mesh, extend_vector(solution.dofmap, solution.y), target)
            record = _record(level, solution, eta)
        except OcpSolverError as e:
            return _finish(_fail(report, level, e), refinement, dim)

        report.records.append(record)
        logger.info(
            f"Level {level}: dofs={record.dofs}, error={record.error:.4e}, "
            f"its={record.iterations}, tol={tol:.3e}, time={record.wall_time:.3f}s"
        )
        if not record.converged:
            _not_converged(report, record)
            break

        if level == levels:
            break
        previous = solution
        if refinement == ADAPTIVE:
            marked = mark_doerfler(eta, theta)
            if marked.size == 0:
                logger.info(f"Error indicators vanish at level {level}; stopping refinement")
                break
            mesh, prolongation = refine_adaptive(mesh, marked)
        else:
            mesh, prolongation = refine_uniform(mesh)

    return _finish(report, refinement, dim)


def _finish(report: StudyReport, refinement: str, dim: int) -> StudyReport:
    report.records = compute_eoc(report.records, refinement, dim)
    return report


def run_uniform_study(levels: int, nested: bool = False, problem: Optional[Problem] = None,
                      schedule: Optional[ToleranceSchedule] = None,
                      settings: Optional[SolverSettings] = None, dim: int = 3, cells: int = 16,
                      config: Optional[Dict[str, Any]] = None) -> StudyReport:
    """Uniform red-refinement hierarchy from the Kuhn mesh with `cells` per axis.

    Args:
        levels: Number of levels, at least one
        nested: Start each level from the prolonged previous solution
        problem: Form, regularization and target
        schedule: Nested tolerance schedule, alpha = beta = 0.5 by default
        settings: Preconditioner and iteration cap
        dim: Space dimension
        cells: Kuhn cells per axis on level 1
        config: Resolved configuration echoed into the report

    Returns:
        StudyReport; a failing level sets `failed` and keeps the earlier records
    """
    return _run(UNIFORM, levels, nested, problem or Problem(),
                schedule or ToleranceSchedule.for_refinement(UNIFORM),
                settings or SolverSettings(), dim, cells, 1.0, config)


def run_adaptive_study(target_levels: int, nested: bool = False, theta: float = 0.5,
                       problem: Optional[Problem] = None,
                       schedule: Optional[ToleranceSchedule] = None,
                       settings: Optional[SolverSettings] = None, dim: int = 3, cells: int = 16,
                       config: Optional[Dict[str, Any]] = None) -> StudyReport:
    """Solve, mark by Dörfler on the element errors, bisect; level 1 is the Kuhn mesh.

    Args:
        target_levels: Number of solves
        nested: Start each level from the interpolated previous solution
        theta: Dörfler fraction in (0, 1]
        problem: Form, regularization and target
        schedule: Nested tolerance schedule, alpha = 0.25 and beta = 0.75 by default
        settings: Preconditioner and iteration cap
        dim: Space dimension
        cells: Kuhn cells per axis on level 1
        config: Resolved configuration echoed into the report

    Returns:
        StudyReport with the adaptive eoc convention

    Raises:
        ParameterError: If theta is outside (0, 1]
    """
    require_fraction("theta", theta)
    return _run(ADAPTIVE, target_levels, nested, problem or Problem(),
                schedule or ToleranceSchedule.for_refinement(ADAPTIVE),
                settings or SolverSettings(), dim, cells, theta, config)


def solution_checksum(y: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(y, dtype=np.float64).tobytes()).hexdigest()


def run_scaling_bench(level: int, problem: Optional[Problem] = None,
                      thread_counts: Sequence[int] = (1, 2, 4, 8),
                      settings: Optional[SolverSettings] = None, rel_tol: float = 1e-6,
                      dim: int = 3, cells: int = 16, repetitions: int = 3) -> List[BenchRecord]:
    """Time the level solve per thread count (best of `repetitions`).

    The system is assembled once; only the Krylov solve is timed.

    Args:
        level: Uniform level to solve
        problem: Form, regularization and target
        thread_counts: Thread counts to time, the first is the speedup baseline
        settings: Preconditioner and iteration cap
        rel_tol: Krylov tolerance
        dim: Space dimension
        cells: Kuhn cells per axis on level 1
        repetitions: Timed runs per thread count

    Returns:
        One BenchRecord per thread count
    """
    problem = problem or Problem()
    settings = settings or SolverSettings()
    require_positive_int("repetitions", repetitions)
    mesh = uniform_mesh(level, cells, dim)
    dofmap = DofMap.from_mesh(mesh)
    system = build_system(problem.form, mesh, dofmap, problem.regularization,
                          problem.target_for(dim), settings.inner_tol)

    original = get_threads()
    rows: List[BenchRecord] = []
    baseline = None
    try:
        for requested in thread_counts:
            threads = set_threads(requested)
            best, y, report = math.inf, None, None
            for _ in range(repetitions):
                y, report = solve_system(system, rel_tol, settings.max_iters, settings.preconditioner)
                best = min(best, report.wall_time)
            baseline = baseline or best
            row = BenchRecord(
                threads=threads,
                dofs=mesh.n_vertices,
                iterations=report.iterations,
                wall_time=best,
                speedup=baseline / best if best > 0 else 0.0,
                checksum=solution_checksum(y),
            )
            rows.append(row)
            logger.info(
                f"Bench threads={row.threads}: its={row.iterations}, time={row.wall_time:.4f}s, "
                f"speedup={row.speedup:.2f}"
            )
    finally:
        set_threads(original)
    return rows


def run_single_level(level: int, problem: Optional[Problem] = None,
                     settings: Optional[SolverSettings] = None, rel_tol: float = 1e-6,
                     dim: int = 3, cells: int = 16,
                     config: Optional[Dict[str, Any]] = None) -> StudyReport:
    """Solve only the level-`level` mesh of the uniform hierarchy from a zero guess."""
    problem = problem or Problem()
    settings = settings or SolverSettings()
    report = StudyReport(refinement=UNIFORM, nested=False, dim=dim, config=dict(config or {}))
    try:
        mesh = uniform_mesh(level, cells, dim)
        solution = solve_level(mesh, problem, settings, rel_tol)
        eta = element_error_indicators(mesh, extend_vector(solution.dofmap, solution.y),
                                       problem.target_for(dim))
    except OcpSolverError as e:
        return _fail(report, level, e)
    record = _record(level, solution, eta)
    report.records.append(record)
    if not record.converged:
        _not_converged(report, record)
    logger.info(f"Level {level}: dofs={record.dofs}, error={record.error:.4e}, its={record.iterations}")
    return report
