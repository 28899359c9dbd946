"""Diagonal operators, operator adapters and Matrix Market I/O."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from linalg.kernels import spmv, to_csr
from utils.errors import DimensionMismatchError, ParameterError
from utils.validation import require_positive_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiagonalMatrix:
    """Diagonal operator with strictly positive entries."""

    entries: np.ndarray

    def __post_init__(self):
        entries = require_positive_array("Diagonal entries", np.ravel(self.entries))
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_matrix_diagonal(cls, A) -> "DiagonalMatrix":
        """diag(A) of a sparse or dense square matrix."""
        return cls(np.asarray(A.diagonal(), dtype=np.float64))

    @classmethod
    def concatenate(cls, blocks: Sequence["DiagonalMatrix"]) -> "DiagonalMatrix":
        """Block-diagonal operator from diagonal blocks."""
        return cls(np.concatenate([b.entries for b in blocks]))

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.n:
            raise DimensionMismatchError(f"Diagonal of size {self.n} applied to shape {v.shape}")
        return v

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v)
        return self.entries * v if v.ndim == 1 else self.entries[:, None] * v

    def solve(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v)
        return v / self.entries if v.ndim == 1 else v / self.entries[:, None]

    def inverse_sqrt(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.entries)

    def as_matrix(self) -> sp.csr_matrix:
        return sp.diags(self.entries, format="csr")


OperatorLike = Union[sp.spmatrix, LinearOperator, np.ndarray, Callable[[np.ndarray], np.ndarray]]


def as_operator(A: OperatorLike, n: Optional[int] = None) -> LinearOperator:
    """Wrap a CSR matrix, dense array, LinearOperator or callable as a square operator.

    Sparse matrices are applied with the deterministic `spmv` kernel. A bare
    callable needs the dimension n.
    """
    if isinstance(A, LinearOperator):
        op = A
    elif sp.issparse(A):
        csr = to_csr(A)
        op = LinearOperator(csr.shape, matvec=lambda x: spmv(csr, np.ravel(x)), dtype=np.float64)
    elif isinstance(A, np.ndarray):
        dense = np.asarray(A, dtype=np.float64)
        op = LinearOperator(dense.shape, matvec=lambda x: dense @ np.ravel(x), dtype=np.float64)
    elif callable(A):
        if n is None:
            raise ParameterError("A callable operator needs its dimension n")
        op = LinearOperator((n, n), matvec=lambda x: A(np.ravel(x)), dtype=np.float64)
    else:
        raise ParameterError(f"Cannot use object of type {type(A).__name__} as an operator")

    if op.shape[0] != op.shape[1]:
        raise DimensionMismatchError(f"Operator must be square, got shape {op.shape}")
    if n is not None and op.shape[0] != n:
        raise DimensionMismatchError(f"Operator has size {op.shape[0]}, expected {n}")
    return op


def write_matrix_market(path: Union[str, Path], A, comment: str = "") -> None:
    """Write a sparse matrix or a vector in Matrix Market format."""
    path = Path(path)
    if sp.issparse(A):
        scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment, symmetry="general")
    else:
        values = np.asarray(A, dtype=np.float64)
        scipy.io.mmwrite(str(path), values.reshape(-1, 1) if values.ndim == 1 else values,
                         comment=comment)
    logger.debug(f"Wrote Matrix Market file {path}")


def read_matrix_market(path: Union[str, Path]):
    """Read a Matrix Market file: CSR for coordinate data, 1-D array for a column vector."""
    data = scipy.io.mmread(str(path))
    if sp.issparse(data):
        return to_csr(data)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2 and data.shape[1] == 1:
        return data[:, 0]
    return data
