"""Thread-parallel CSR kernels with reproducible reductions."""

import logging
import math

import numpy as np
import scipy.sparse as sp
from numba import config as numba_config
from numba import get_num_threads, njit, prange, set_num_threads

from utils.errors import DimensionMismatchError, ParameterError

logger = logging.getLogger(__name__)

# Block length of the strict-deterministic dot product reduction
DOT_BLOCK = 8192

_strict = True


@njit(parallel=True)
def _csr_matvec(indptr, indices, data, x, y):
    n = indptr.shape[0] - 1
    for i in prange(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        y[i] = acc


@njit(parallel=True)
def _block_partials(x, y, block):
    n = x.shape[0]
    n_blocks = (n + block - 1) // block
    partials = np.zeros(n_blocks)
    for b in prange(n_blocks):
        start = b * block
        stop = min(start + block, n)
        acc = 0.0
        for i in range(start, stop):
            acc += x[i] * y[i]
        partials[b] = acc
    return partials


@njit
def _ordered_sum(values):
    acc = 0.0
    for i in range(values.shape[0]):
        acc += values[i]
    return acc


def max_threads() -> int:
    """Size of the numba worker pool."""
    return int(numba_config.NUMBA_NUM_THREADS)


def set_threads(n: int) -> int:
    """Cap the kernel worker pool at n threads, clamped to the available pool.

    Returns:
        The thread count actually in effect
    """
    if n is None:
        return get_threads()
    if int(n) < 1:
        raise ParameterError(f"Thread count must be >= 1, got {n}")
    available = max_threads()
    if n > available:
        logger.warning(f"Requested {n} threads but only {available} are available; clamping")
        n = available
    set_num_threads(int(n))
    return int(n)


def get_threads() -> int:
    return int(get_num_threads())


def set_strict_determinism(flag: bool) -> None:
    """Fix the dot-product reduction tree independent of the thread count."""
    global _strict
    _strict = bool(flag)


def strict_determinism() -> bool:
    return _strict


def to_csr(A) -> sp.csr_matrix:
    """Canonical CSR form (float64, sorted column indices)."""
    csr = sp.csr_matrix(A, dtype=np.float64)
    if not csr.has_sorted_indices:
        csr = csr.sorted_indices()
    return csr


def spmv(A: sp.csr_matrix, x: np.ndarray, out: np.ndarray = None) -> np.ndarray:
    """y = A x with a fixed per-row accumulation order."""
    if not sp.isspmatrix_csr(A):
        A = to_csr(A)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or A.shape[1] != x.shape[0]:
        raise DimensionMismatchError(
            f"Cannot multiply {A.shape[0]}x{A.shape[1]} matrix with vector of shape {x.shape}"
        )
    if out is None:
        out = np.empty(A.shape[0], dtype=np.float64)
    data = A.data if A.data.dtype == np.float64 else A.data.astype(np.float64)
    _csr_matvec(A.indptr, A.indices, data, x, out)
    return out


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Blocked dot product.

    Partial sums over contiguous blocks are added in block order. In strict mode
    the block length is fixed, otherwise it follows the thread count.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"Dot product of shapes {x.shape} and {y.shape}")
    n = x.shape[0]
    if n == 0:
        return 0.0
    block = DOT_BLOCK if _strict else max(1, math.ceil(n / get_threads()))
    return float(_ordered_sum(_block_partials(x, y, block)))


def norm(x: np.ndarray) -> float:
    return math.sqrt(dot(x, x))
