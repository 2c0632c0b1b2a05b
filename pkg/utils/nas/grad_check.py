"""
Central finite-difference gradient checks.
"""

from typing import Callable, Optional

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|), guarded against all-zero gradients."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numerical_gradient(
    loss_fn: Callable[[], float],
    point: np.ndarray,
    h: float = 1e-6,
    coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Central differences of ``loss_fn`` with respect to ``point``.

    ``point`` is perturbed in place and restored; ``loss_fn`` must read it.

    Args:
        loss_fn: Zero-argument scalar function
        point: Float64 array the loss depends on
        h: Step size
        coords: Flat indices to check (all when None)

    Returns:
        Array shaped like ``point``; unchecked entries are NaN
    """
    if point.dtype != np.float64:
        raise TypeError("finite differences must run in float64")
    flat = point.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    indices = np.arange(flat.size) if coords is None else np.asarray(coords)
    for idx in indices:
        original = flat[idx]
        flat[idx] = original + h
        plus = loss_fn()
        flat[idx] = original - h
        minus = loss_fn()
        flat[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad.reshape(point.shape)


def grad_check(
    loss_fn: Callable[[], float],
    point: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-6,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare an analytic gradient against central differences.

    Args:
        loss_fn: Zero-argument scalar function reading ``point``
        point: Float64 array (perturbed in place, restored afterwards)
        analytic: Analytic gradient at ``point``
        h: Finite-difference step
        max_coords: Check a random subset of this many coordinates
        rng: Generator for the subset

    Returns:
        Maximum relative error over the checked coordinates
    """
    coords = None
    if max_coords is not None and max_coords < point.size:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(point.size, size=max_coords, replace=False))
    numeric = numerical_gradient(loss_fn, point, h=h, coords=coords)
    if coords is None:
        return relative_error(analytic, numeric)
    return relative_error(analytic.reshape(-1)[coords], numeric.reshape(-1)[coords])
