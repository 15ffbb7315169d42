"""Tensor conventions and global numeric switches.

Activations, weights, and gradients are plain numpy arrays in row-major
N x C x H x W layout. float64 is the default and the only dtype the
verification suite runs under; float32 is a performance mode.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float64

# When enabled, every kernel asserts its output is finite. Cheap insurance
# for the test suite; off by default in production runs.
check_finite = False


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}, expected float64 or float32")
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dt.type


@contextlib.contextmanager
def dtype_context(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous array of the default float dtype."""
    return np.ascontiguousarray(data, dtype=default_dtype())


def guard_finite(arr: np.ndarray, opname: str) -> np.ndarray:
    if check_finite and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{opname} produced a non-finite value")
    return arr


def require_nchw(x: np.ndarray, opname: str) -> None:
    from .errors import ConfigError

    if x.ndim != 4:
        raise ConfigError(f"{opname}: expected a 4-d N x C x H x W tensor, got {x.ndim}-d shape {x.shape}")
