"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_points(points, name: str = "points") -> np.ndarray:
    """Validate and return an (N, 3) float64 point array.

    Accepts anything array-like. Raises ValueError on wrong shape, empty
    input, or non-finite coordinates.
    """
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_vector3(vec, name: str = "vector") -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(vec)}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_rng(rng) -> np.random.Generator:
    """Coerce an int seed or Generator into a numpy Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(int(rng))
    raise TypeError(f"expected int seed or numpy Generator, got {type(rng)!r}")
