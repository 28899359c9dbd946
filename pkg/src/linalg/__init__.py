"""Sparse kernels, Krylov solvers and eigenvalue estimation."""

from linalg.eigen import EigenEstimate, extremal_generalized_eigs
from linalg.kernels import (
    dot,
    get_threads,
    set_strict_determinism,
    set_threads,
    spmv,
    strict_determinism,
)
from linalg.krylov import KrylovReport, minres, pcg
from linalg.matrices import (
    DiagonalMatrix,
    as_operator,
    read_matrix_market,
    write_matrix_market,
)

__all__ = [
    "DiagonalMatrix",
    "EigenEstimate",
    "KrylovReport",
    "as_operator",
    "dot",
    "extremal_generalized_eigs",
    "get_threads",
    "minres",
    "pcg",
    "read_matrix_market",
    "set_strict_determinism",
    "set_threads",
    "spmv",
    "strict_determinism",
    "write_matrix_market",
]
