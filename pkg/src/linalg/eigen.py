"""Extremal eigenvalues of the diagonally scaled pencil (A, P)."""

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from linalg.matrices import DiagonalMatrix, OperatorLike, as_operator
from utils.errors import EigenSolverError

logger = logging.getLogger(__name__)

DENSE_THRESHOLD = 600
LANCZOS_ITERATIONS = 200
# Ritz residual relative to the Ritz value for three significant digits
RITZ_TOLERANCE = 1e-3


@dataclass
class EigenEstimate:
    """Extremal generalized eigenvalues; unpacks as (lambda_min, lambda_max)."""

    lambda_min: float
    lambda_max: float
    method: str
    confident: bool
    iterations: int = 0

    def __iter__(self) -> Iterator[float]:
        yield self.lambda_min
        yield self.lambda_max


def _dense(A: OperatorLike, n: int) -> np.ndarray:
    if sp.issparse(A):
        return A.toarray()
    if isinstance(A, np.ndarray):
        return np.array(A, dtype=np.float64)
    op = as_operator(A, n)
    dense = np.empty((n, n))
    unit = np.zeros(n)
    for j in range(n):
        unit[j] = 1.0
        dense[:, j] = op.matvec(unit)
        unit[j] = 0.0
    return dense


def _lanczos(op, scale: np.ndarray, n: int, iterations: int, seed: int) -> EigenEstimate:
    """Lanczos on P^-1/2 A P^-1/2 with full reorthogonalization."""
    rng = np.random.default_rng(seed)
    k = min(iterations, n)
    basis = np.zeros((k, n))
    alphas, betas = [], []

    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    beta = 0.0
    exhausted = False
    for j in range(k):
        basis[j] = q
        w = scale * op.matvec(scale * q)
        alpha = float(q @ w)
        w -= alpha * q
        if j > 0:
            w -= beta * basis[j - 1]
        w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))
        if beta <= 1e-12 * max(abs(alpha), 1.0):
            exhausted = True
            break
        betas.append(beta)
        q = w / beta

    m = len(alphas)
    off = np.asarray(betas[: m - 1])
    if m == 1:
        theta, vectors = np.asarray(alphas), np.ones((1, 1))
    else:
        theta, vectors = scipy.linalg.eigh_tridiagonal(np.asarray(alphas), off)
    if exhausted:
        confident = True
    else:
        bounds = beta * np.abs(vectors[-1, [0, -1]])
        confident = bool(np.all(bounds <= RITZ_TOLERANCE * np.abs(theta[[0, -1]])))
    if not confident:
        logger.warning(
            f"Lanczos estimate after {m} iterations is not certified to three digits: "
            f"[{theta[0]:.4e}, {theta[-1]:.4e}]"
        )
    return EigenEstimate(float(theta[0]), float(theta[-1]), "lanczos", confident, m)


def extremal_generalized_eigs(
    A: OperatorLike,
    P: DiagonalMatrix,
    n_small_threshold: int = DENSE_THRESHOLD,
    lanczos_iterations: int = LANCZOS_ITERATIONS,
    seed: int = 0,
) -> EigenEstimate:
    """Smallest and largest eigenvalue of A x = lambda P x for symmetric A and SPD diagonal P.

    Small problems use a dense symmetric eigensolve of P^-1/2 A P^-1/2, larger ones
    Lanczos with full reorthogonalization.
    """
    n = P.n
    scale = P.inverse_sqrt()
    try:
        if n <= n_small_threshold:
            scaled = scale[:, None] * _dense(A, n) * scale[None, :]
            values = scipy.linalg.eigvalsh(0.5 * (scaled + scaled.T))
            logger.debug(f"Dense eigensolve of size {n}: [{values[0]:.6e}, {values[-1]:.6e}]")
            return EigenEstimate(float(values[0]), float(values[-1]), "dense", True, 0)
        return _lanczos(as_operator(A, n), scale, n, lanczos_iterations, seed)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise EigenSolverError(f"Eigenvalue computation failed for size {n}: {e}") from e
