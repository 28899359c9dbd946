"""Preconditioned Krylov solvers: PCG for SPD systems, MINRES for symmetric indefinite ones."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from linalg.kernels import dot
from linalg.matrices import DiagonalMatrix, OperatorLike, as_operator
from utils.errors import (
    DimensionMismatchError,
    IndefiniteOperatorError,
    ParameterError,
    SolverBreakdownError,
)

logger = logging.getLogger(__name__)

RECOMPUTE_RESIDUAL_EVERY = 50
# Relative size of the Givens pivot below which MINRES reports a singular subspace
SINGULAR_TOL = 100 * np.finfo(np.float64).eps


@dataclass
class KrylovReport:
    """Outcome of a Krylov solve; residuals are preconditioned norms."""

    method: str
    iterations: int
    initial_residual: float
    final_residual: float
    converged: bool
    wall_time: float
    residual_history: List[float] = field(default_factory=list)

    @property
    def relative_residual(self) -> float:
        if self.initial_residual == 0:
            return 0.0
        return self.final_residual / self.initial_residual

    def as_dict(self) -> dict:
        return asdict(self)


def _prepare(
    apply_A: OperatorLike,
    precond: DiagonalMatrix,
    b: np.ndarray,
    x0: Optional[np.ndarray],
    rel_tol: float,
    max_iters: int,
):
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    A = as_operator(apply_A, n)
    if precond.n != n:
        raise DimensionMismatchError(f"Preconditioner has size {precond.n}, system has {n}")
    if not 0 < rel_tol < 1:
        raise ParameterError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    if max_iters < 0:
        raise ParameterError(f"max_iters must be >= 0, got {max_iters}")
    if x0 is None:
        x = np.zeros(n)
    else:
        x = np.array(x0, dtype=np.float64)
        if x.shape != b.shape:
            raise DimensionMismatchError(f"Initial guess shape {x.shape} != rhs shape {b.shape}")
    return A, b, x


def pcg(
    apply_A: OperatorLike,
    precond: DiagonalMatrix,
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    rel_tol: float = 1e-6,
    max_iters: int = 1000,
) -> Tuple[np.ndarray, KrylovReport]:
    """Preconditioned conjugate gradients (Hestenes-Stiefel) with a diagonal preconditioner.

    Stops when sqrt(r.P^-1 r) <= rel_tol * sqrt(r0.P^-1 r0). The residual is
    recomputed as b - Ax every 50 iterations. Without convergence the iterate with
    the smallest preconditioned residual is returned and the report says so.

    Args:
        apply_A: SPD matrix or LinearOperator
        precond: Diagonal preconditioner P
        b: Right-hand side
        x0: Initial guess, zero when None
        rel_tol: Required reduction of the preconditioned residual norm
        max_iters: Iteration cap

    Returns:
        Tuple of (iterate, KrylovReport)

    Raises:
        IndefiniteOperatorError: If a search direction with p.Ap <= 0 appears
    """
    A, b, x = _prepare(apply_A, precond, b, x0, rel_tol, max_iters)
    start = time.perf_counter()

    r = b - A.matvec(x)
    z = precond.solve(r)
    rz = dot(r, z)
    initial = math.sqrt(max(rz, 0.0))
    history = [initial]
    if initial == 0.0:
        return x, KrylovReport("pcg", 0, 0.0, 0.0, True, time.perf_counter() - start, history)

    target = rel_tol * initial
    p = z.copy()
    best_x, best_res = x.copy(), initial
    residual = initial
    converged = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        Ap = A.matvec(p)
        pAp = dot(p, Ap)
        if pAp <= 0:
            raise IndefiniteOperatorError(
                f"Non-positive curvature p.Ap={pAp:.3e} at iteration {iterations}",
                suggested_action="PCG needs a symmetric positive definite operator; "
                "use MINRES for the saddle form.",
                context={"iteration": iterations},
            )
        alpha = rz / pAp
        x += alpha * p
        if iterations % RECOMPUTE_RESIDUAL_EVERY == 0:
            r = b - A.matvec(x)
        else:
            r -= alpha * Ap
        z = precond.solve(r)
        rz_new = dot(r, z)
        residual = math.sqrt(max(rz_new, 0.0))
        history.append(residual)

        if residual <= target:
            converged = True
            break
        if residual < best_res:
            best_res = residual
            best_x = x.copy()

        p = z + (rz_new / rz) * p
        rz = rz_new
        logger.debug(f"pcg iteration {iterations}: residual {residual:.3e}")

    if not converged:
        logger.warning(
            f"PCG did not converge in {max_iters} iterations "
            f"(relative residual {best_res / initial:.3e}, target {rel_tol:.1e})"
        )
        if best_res < residual:
            x, residual = best_x, best_res

    report = KrylovReport(
        method="pcg",
        iterations=iterations,
        initial_residual=initial,
        final_residual=residual,
        converged=converged,
        wall_time=time.perf_counter() - start,
        residual_history=history,
    )
    return x, report


def minres(
    apply_S: OperatorLike,
    precond: DiagonalMatrix,
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    rel_tol: float = 1e-6,
    max_iters: int = 1000,
) -> Tuple[np.ndarray, KrylovReport]:
    """Preconditioned MINRES (Paige-Saunders recurrence) for symmetric indefinite systems.

    The monitored residual is the preconditioned norm ||r||_{P^-1} carried by the
    Givens recurrence; it is non-increasing.

    Args:
        apply_S: Symmetric, possibly indefinite, matrix or LinearOperator
        precond: SPD diagonal preconditioner P
        b: Right-hand side
        x0: Initial guess, zero when None
        rel_tol: Required reduction of ||r||_{P^-1}
        max_iters: Iteration cap

    Returns:
        Tuple of (iterate, KrylovReport)

    Raises:
        SolverBreakdownError: When the Lanczos process ends in a singular
            subspace or the preconditioned inner product turns negative
    """
    S, b, x = _prepare(apply_S, precond, b, x0, rel_tol, max_iters)
    start = time.perf_counter()

    r1 = b - S.matvec(x)
    y = precond.solve(r1)
    beta1_sq = dot(r1, y)
    if beta1_sq < 0:
        raise SolverBreakdownError("Preconditioner is not positive definite")
    beta1 = math.sqrt(beta1_sq)
    history = [beta1]
    if beta1 == 0.0:
        return x, KrylovReport("minres", 0, 0.0, 0.0, True, time.perf_counter() - start, history)

    r2 = r1.copy()
    old_beta, beta = 0.0, beta1
    dbar, epsln, phibar = 0.0, 0.0, beta1
    cs, sn = -1.0, 0.0
    w = np.zeros_like(b)
    w2 = np.zeros_like(b)
    anorm = 0.0
    target = rel_tol * beta1
    converged = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        v = y / beta
        y = S.matvec(v)
        if iterations >= 2:
            y = y - (beta / old_beta) * r1
        alpha = dot(v, y)
        y = y - (alpha / beta) * r2
        r1, r2 = r2, y
        y = precond.solve(r2)
        old_beta = beta
        beta_sq = dot(r2, y)
        if beta_sq < 0:
            raise SolverBreakdownError(
                f"Negative preconditioned inner product at iteration {iterations}",
                context={"iteration": iterations},
            )
        beta = math.sqrt(beta_sq)

        old_eps = epsln
        delta = cs * dbar + sn * alpha
        gbar = sn * dbar - cs * alpha
        epsln = sn * beta
        dbar = -cs * beta
        anorm = max(anorm, abs(alpha), beta)
        gamma = math.hypot(gbar, beta)
        if gamma <= SINGULAR_TOL * anorm:
            raise SolverBreakdownError(
                f"Operator is singular on the Krylov subspace at iteration {iterations} "
                f"(residual {phibar:.3e})",
                suggested_action="Check the system for a nontrivial kernel or an inconsistent rhs.",
                context={"iteration": iterations, "residual": phibar},
            )
        cs, sn = gbar / gamma, beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1, w2 = w2, w
        w = (v - old_eps * w1 - delta * w2) / gamma
        x += phi * w
        history.append(phibar)
        logger.debug(f"minres iteration {iterations}: residual {phibar:.3e}")

        if phibar <= target:
            converged = True
            break

    if not converged:
        logger.warning(
            f"MINRES did not converge in {max_iters} iterations "
            f"(relative residual {phibar / beta1:.3e}, target {rel_tol:.1e})"
        )

    report = KrylovReport(
        method="minres",
        iterations=iterations,
        initial_residual=beta1,
        final_residual=phibar,
        converged=converged,
        wall_time=time.perf_counter() - start,
        residual_history=history,
    )
    return x, report
