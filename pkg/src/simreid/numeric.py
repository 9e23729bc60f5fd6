"""Vector arithmetic shared by every module.

Embeddings, features and model parameters are plain float64 numpy
arrays; the helpers here centralize the shape and finiteness checks the
rest of the package relies on.
"""

from __future__ import annotations

import numpy as np


class DimensionMismatch(ValueError):
    """Two vectors of different dimension met an operation; caller bug."""


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(
            f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )


def euclidean_distance(a, b) -> float:
    """sqrt(sum((a_i - b_i)^2)); symmetric, zero iff a == b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_dim(a, b)
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def squared_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_dim(a, b)
    diff = a - b
    return float(np.dot(diff, diff))


def pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    """(n, n) matrix of squared Euclidean distances between rows."""
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.maximum(d2, 0.0, out=d2)  # clamp negative rounding residue
    return d2
