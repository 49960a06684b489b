"""Input validation helpers shared by the estimator surfaces."""

from __future__ import annotations

import numpy as np

__all__ = ["check_motion", "check_finite", "check_length_multiple", "check_ratio_sum"]


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_motion(frames, width: int | None = None, name: str = "motion") -> np.ndarray:
    """Validate a (T, width) frame matrix: 2-D, finite, optionally fixed width."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (frames x channels), got shape {arr.shape}")
    if width is not None and arr.shape[1] != width:
        raise ValueError(f"{name} must have {width} channels, got {arr.shape[1]}")
    return check_finite(arr, name)


def check_length_multiple(t: int, factor: int, name: str = "sequence") -> None:
    if t % factor != 0:
        raise ValueError(f"{name} length {t} is not divisible by {factor}")


def check_ratio_sum(ratios, tol: float = 1e-9) -> np.ndarray:
    arr = np.asarray(ratios, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1 or np.any(arr < 0):
        raise ValueError("ratios must be a non-negative 1-D sequence")
    if abs(arr.sum() - 1.0) > tol:
        raise ValueError(f"ratios must sum to 1 (got {arr.sum()!r})")
    return arr
