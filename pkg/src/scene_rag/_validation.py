"""Input checks shared by the estimators and the store."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np


def check_matrix(X, *, dtype=np.float64, allow_empty=True) -> np.ndarray:
    """Coerce ``X`` to a finite 2-D array, promoting a single vector to one row."""
    arr = np.asarray(X, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise ValueError("expected at least one feature column")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError("expected at least one row")
    if not np.all(np.isfinite(arr)):
        raise ValueError("input contains NaN or infinity")
    return arr


def check_vector(v, dim: int | None = None) -> np.ndarray:
    """Coerce ``v`` to a finite 1-D float64 array of length ``dim``."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatchError(dim, arr.shape[0])
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains NaN or infinity")
    return arr


def check_texts(texts) -> list[str]:
    """Accept a single string or an iterable of strings; always return a list."""
    if isinstance(texts, str):
        return [texts]
    if not isinstance(texts, Iterable):
        raise TypeError(f"expected text or an iterable of text, got {type(texts).__name__}")
    out = list(texts)
    for i, t in enumerate(out):
        if not isinstance(t, str):
            raise TypeError(f"item {i} is {type(t).__name__}, expected str")
    return out


class DimensionMismatchError(ValueError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"dimension mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual
