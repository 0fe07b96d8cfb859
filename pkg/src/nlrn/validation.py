"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np


class NumericalError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains NaN or Inf")
    return arr


def check_image(img, name: str = "image", dtype=np.float64) -> np.ndarray:
    """Return ``img`` as a finite 2-D float array."""
    arr = np.asarray(img, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D grayscale array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty")
    return check_finite(arr, name)


def check_image_stack(X, name: str = "X", dtype=np.float64):
    """Normalize ``X`` to a list of 2-D images.

    Accepts a single ``(H, W)`` image, an ``(n, H, W)`` stack, or a sequence
    of differently sized images. Returns ``(images, was_single)``.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_image(X, name, dtype)], True
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [check_image(x, name, dtype) for x in X], False
    if isinstance(X, (list, tuple)):
        if not X:
            raise ValueError(f"{name} is empty")
        return [check_image(x, name, dtype) for x in X], False
    raise ValueError(f"{name} must be a 2-D image, a 3-D stack or a list of images")


def check_odd(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or value < 1 or value % 2 == 0:
        raise ValueError(f"{name} must be a positive odd integer, got {value!r}")
    return int(value)


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
