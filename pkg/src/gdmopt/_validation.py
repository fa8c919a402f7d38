"""Error types and small input-checking helpers shared across the package."""

import numpy as np


class InputError(ValueError):
    """Raised for malformed arguments (bad shapes, out-of-range values)."""


class ConfigurationError(RuntimeError):
    """Raised when required configuration (stats, checkpoints) is missing."""


class MetricError(ArithmeticError):
    """Raised when a metric is undefined for the given inputs."""


def as_2d(a, width=None, name="array"):
    """Return ``a`` as a float64 2-D array, promoting a single vector to one row.

    Also reports whether the input was a single vector so callers can squeeze
    their result back.
    """
    arr = np.asarray(a, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InputError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if width is not None and arr.shape[1] != width:
        raise InputError(f"{name} must have {width} columns, got {arr.shape[1]}")
    return arr, single


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name):
    if not value > 0:
        raise InputError(f"{name} must be positive, got {value!r}")
    return value
