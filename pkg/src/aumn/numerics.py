"""Dense float64 kernels used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Functions
that act "per row" operate on the last axis, so they also accept stacked
inputs with leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Convert to a finite 2-D float64 array, rejecting anything else."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    # exp of a non-positive argument only, so nothing overflows
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(a, dtype=np.float64), 0.0)


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


def l1_norm(v: np.ndarray) -> float:
    return float(np.sum(np.abs(v)))


def l2_norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(v))))
