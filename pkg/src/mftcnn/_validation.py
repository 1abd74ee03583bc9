"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import ContractViolation


def as_float_array(a, *, name: str, ndim: int | None = None, shape=None,
                   allow_nan: bool = False) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ContractViolation(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if shape is not None:
        for axis, (want, got) in enumerate(zip(shape, arr.shape)):
            if want is not None and want != got:
                raise ContractViolation(
                    f"{name}: axis {axis} has extent {got}, expected {want}")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name}: contains non-finite values")
    return arr


def check_state_batch(x, dim: int, *, name: str = "states") -> np.ndarray:
    """Coerce ``x`` to an ``(n, dim)`` array; 1-d input of length ``dim`` is one row,
    and for ``dim == 1`` a 1-d input is a column."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    return as_float_array(arr, name=name, ndim=2, shape=(None, dim))


def check_probability(value: float, *, name: str, open_interval: bool = True) -> float:
    v = float(value)
    ok = 0.0 < v < 1.0 if open_interval else 0.0 <= v <= 1.0
    if not ok:
        bounds = "(0, 1)" if open_interval else "[0, 1]"
        raise ContractViolation(f"{name} must lie in {bounds}, got {v}")
    return v


def check_positive(value, *, name: str, strict: bool = True):
    if (value <= 0) if strict else (value < 0):
        raise ContractViolation(f"{name} must be {'positive' if strict else 'nonnegative'}, got {value}")
    return value
