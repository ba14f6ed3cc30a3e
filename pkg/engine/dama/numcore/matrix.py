"""
Dense matrix helpers.

A ``Matrix`` is a two-dimensional, C-contiguous float64 ndarray: ``rows`` and
``cols`` are its shape and the row-major buffer is its data.
"""
from typing import Any

import numpy as np
import numpy.typing as npt

from dama.core.exceptions import NonFiniteError, ShapeMismatchError


Matrix = npt.NDArray[np.float64]


def as_matrix(value: Any, name: str = "matrix", finite: bool = True) -> Matrix:
    """Coerce to a 2-D float64 matrix, rejecting empty or non-finite input."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def _check_finite(result: Matrix, op: str) -> Matrix:
    if not np.all(np.isfinite(result)):
        raise NonFiniteError(f"{op} produced non-finite output")
    return result


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product; both shapes are reported on mismatch."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul dimension mismatch: a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    return _check_finite(a @ b, "matmul")


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(as_matrix(a, "a").T)


def add(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _check_finite(a + b, "add")


def scale(a: Matrix, factor: float) -> Matrix:
    return _check_finite(as_matrix(a, "a") * float(factor), "scale")


def frobenius_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(a))))
