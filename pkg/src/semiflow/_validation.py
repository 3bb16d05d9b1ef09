"""Small input-validation helpers used across the package."""

import numbers

import numpy as np

from .errors import DomainError, PreconditionError


def as_points(x, d):
    """Return ``x`` as a float array of shape ``(..., d)``.

    Scalars and 1-D arrays are accepted for ``d == 1``.
    """
    arr = np.asarray(x, dtype=float)
    if d == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
        arr = arr[..., None]
    if arr.shape[-1] != d:
        raise DomainError(f"expected points with trailing dimension {d}, got shape {arr.shape}")
    return arr


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise PreconditionError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_positive(value, name, strict=True):
    value = float(value)
    if not np.isfinite(value) or value < 0 or (strict and value == 0):
        raise PreconditionError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value!r}")
    return value


def check_alpha(alpha):
    alpha = float(alpha)
    if not 0 < alpha <= 1:
        raise PreconditionError(f"Hölder exponent must lie in (0, 1], got {alpha}")
    return alpha


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
