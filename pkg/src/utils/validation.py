"""Parameter validation utilities for solver inputs."""

import logging
from typing import Iterable, Sequence

import numpy as np

from utils.errors import ParameterError

logger = logging.getLogger(__name__)

SUPPORTED_DIMENSIONS = (1, 2, 3)


def require_dimension(dim: int) -> int:
    """Ensure the spatial dimension is supported.

    Args:
        dim: Spatial dimension

    Returns:
        The dimension as int

    Raises:
        ParameterError: If dim is not 1, 2 or 3
    """
    if dim not in SUPPORTED_DIMENSIONS:
        raise ParameterError(
            f"Unsupported dimension {dim}. Expected one of {SUPPORTED_DIMENSIONS}",
            suggested_action="Use --dim 1, 2 or 3.",
        )
    return int(dim)


def require_positive(name: str, value: float) -> float:
    """Ensure a scalar is strictly positive."""
    if not np.isfinite(value) or value <= 0:
        raise ParameterError(f"{name} must be positive, got {value}")
    return value


def require_positive_int(name: str, value: int) -> int:
    """Ensure an integer count is at least one."""
    if int(value) != value or value < 1:
        raise ParameterError(f"{name} must be an integer >= 1, got {value}")
    return int(value)


def require_positive_array(name: str, values: np.ndarray) -> np.ndarray:
    """Ensure every entry of an array is strictly positive and finite."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (not np.all(np.isfinite(values)) or values.min() <= 0):
        bad = int(np.argmin(values))
        raise ParameterError(
            f"{name} must be positive everywhere; entry {bad} is {values[bad]}",
            context={"index": bad},
        )
    return values


def require_fraction(name: str, value: float, include_one: bool = True) -> float:
    """Ensure value lies in (0, 1] (or (0, 1) when include_one is False)."""
    upper_ok = value <= 1 if include_one else value < 1
    if not (value > 0 and upper_ok):
        interval = "(0, 1]" if include_one else "(0, 1)"
        raise ParameterError(f"{name} must lie in {interval}, got {value}")
    return float(value)


def require_index_set(name: str, indices: Iterable[int], size: int) -> np.ndarray:
    """Ensure indices are valid positions into a collection of the given size.

    Returns:
        Sorted unique int64 array of the indices
    """
    if isinstance(indices, np.ndarray):
        arr = indices.astype(np.int64, copy=False).ravel()
    else:
        arr = np.fromiter(indices, dtype=np.int64)
    arr = np.unique(arr)
    if arr.size and (arr[0] < 0 or arr[-1] >= size):
        raise ParameterError(
            f"{name} contains indices outside [0, {size}): min={arr[0]}, max={arr[-1]}"
        )
    return arr


def require_same_length(name: str, values: Sequence, expected: int) -> None:
    """Ensure a sequence has the expected length."""
    if len(values) != expected:
        raise ParameterError(f"{name} must have length {expected}, got {len(values)}")
