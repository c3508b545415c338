"""Input validation helpers used across modules."""

import math

import numpy as np

from .labels import N_CLASSES

PROB_SUM_TOL = 1e-6


def check_unit_interval(value, name, *, upper_open=False):
    """Return ``value`` as float, raising ValueError outside [0, 1]."""
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a number, got {value!r}") from None
    if math.isnan(value) or value < 0.0 or value > 1.0 or (upper_open and value == 1.0):
        interval = "[0, 1)" if upper_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return value


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_probs(probs):
    """Validate a class distribution and return it as a float64 array.

    Raises ValueError with a reason; callers wrap it in their own error type.
    """
    try:
        arr = np.asarray(probs, dtype=np.float64)
    except (TypeError, ValueError):
        raise ValueError(f"probabilities are not numeric: {probs!r}") from None
    if arr.shape != (N_CLASSES,):
        raise ValueError(f"expected {N_CLASSES} probabilities, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite probability in {arr.tolist()}")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"probability outside [0, 1] in {arr.tolist()}")
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"probabilities sum to {total:.6g}, not 1")
    return arr


def check_increasing(values, name):
    values = [check_unit_interval(v, f"{name} entry") for v in values]
    if not values:
        raise ValueError(f"{name} must be nonempty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly increasing")
    return tuple(values)
