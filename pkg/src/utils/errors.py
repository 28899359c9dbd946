"""Custom error classes for the optimal control solver suite."""

import numpy as np


class OcpSolverError(Exception):
    """Base exception for all solver suite errors."""

    def __init__(
        self,
        message: str,
        error_source: str = "SOLVER",
        error_code: str = None,
        suggested_action: str = None,
        context: dict = None,
    ):
        """Initialize solver error with structured information.

        Args:
            message: Error message
            error_source: Source of error (CONFIGURATION, USER_INPUT, MESH, ASSEMBLY,
                SOLVER, EIGENSOLVER)
            error_code: Specific error code for categorization
            suggested_action: Actionable suggestion for resolution
            context: Additional context information
        """
        super().__init__(message)
        self.error_source = error_source
        self.error_code = error_code
        self.suggested_action = suggested_action
        self.context = context or {}

    def to_dict(self) -> dict:
        """Convert error to dictionary for structured logging."""
        return {
            "error_type": self.__class__.__name__,
            "message": str(self),
            "error_source": self.error_source,
            "error_code": self.error_code,
            "suggested_action": self.suggested_action,
            "context": self.context,
        }


class ConfigurationError(OcpSolverError):
    """Raised when the run configuration is invalid or inconsistent."""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault("error_code", "INVALID_CONFIGURATION")
        super().__init__(message, error_source="CONFIGURATION", **kwargs)


class ParameterError(OcpSolverError):
    """Raised when an operation is called with arguments violating its precondition."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message, error_source="USER_INPUT", error_code="INVALID_PARAMETER", **kwargs
        )


class DimensionMismatchError(OcpSolverError):
    """Raised when operator and vector dimensions do not agree."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message, error_source="USER_INPUT", error_code="DIMENSION_MISMATCH", **kwargs
        )


class MeshError(OcpSolverError):
    """Raised when a mesh is not conforming or refinement cannot complete."""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault("error_code", "MESH_INVALID")
        super().__init__(message, error_source="MESH", **kwargs)


class NumericalError(OcpSolverError):
    """Raised when assembled data violates a numerical requirement."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message, error_source="ASSEMBLY", error_code="NUMERICAL_ERROR", **kwargs
        )


class IndefiniteOperatorError(OcpSolverError):
    """Raised when PCG detects a non-positive curvature direction."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message, error_source="SOLVER", error_code="INDEFINITE_OPERATOR", **kwargs
        )


class SolverBreakdownError(OcpSolverError):
    """Raised when a Krylov recurrence breaks down before convergence."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message, error_source="SOLVER", error_code="KRYLOV_BREAKDOWN", **kwargs
        )


class InnerSolveError(OcpSolverError):
    """Raised when the inner solve of a Schur complement application fails."""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message, error_source="SOLVER", error_code="INNER_SOLVE_FAILED", **kwargs
        )


class EigenSolverError(OcpSolverError):
    """Raised when extremal eigenvalues cannot be computed."""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault("error_code", "EIGENSOLVER_FAILED")
        super().__init__(message, error_source="EIGENSOLVER", **kwargs)


def create_solver_error(original_error: Exception, context: dict = None) -> OcpSolverError:
    """Create a structured solver error from any exception.

    Args:
        original_error: The original exception
        context: Additional context information

    Returns:
        OcpSolverError carrying a classification and suggested action
    """
    context = context or {}

    if isinstance(original_error, OcpSolverError):
        original_error.context.update(context)
        return original_error

    error_str = str(original_error)

    if isinstance(original_error, MemoryError):
        return OcpSolverError(
            f"Out of memory: {error_str}",
            error_source="SOLVER",
            error_code="OUT_OF_MEMORY",
            suggested_action="Reduce the number of levels or the initial cells per axis.",
            context=context,
        )
    elif isinstance(original_error, np.linalg.LinAlgError):
        return EigenSolverError(
            f"Dense linear algebra failed: {error_str}",
            error_code="DENSE_LINALG_FAILED",
            suggested_action="Check that the matrices are symmetric and the preconditioner is positive.",
            context=context,
        )
    elif isinstance(original_error, (FloatingPointError, ZeroDivisionError)):
        return NumericalError(
            f"Floating point failure: {error_str}",
            suggested_action="Check mesh quality and regularization parameters for degenerate values.",
            context=context,
        )
    elif isinstance(original_error, ValueError):
        return ParameterError(
            f"Invalid value: {error_str}",
            suggested_action="Review the arguments passed to the failing operation.",
            context=context,
        )
    else:
        return OcpSolverError(
            f"Unexpected failure: {error_str}",
            error_code="UNKNOWN_ERROR",
            suggested_action="Rerun with --log-level DEBUG and inspect logs/ocp_solvers.log.",
            context=context,
        )
