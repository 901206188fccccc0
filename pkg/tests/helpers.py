"""Shared test oracles: finite-difference gradients and comparison helpers."""

from __future__ import annotations

import numpy as np


def fd_gradient(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative disagreement between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def well_separated(rng: np.random.Generator, shape, spacing: float = 0.05) -> np.ndarray:
    """Random array whose values are pairwise separated by >= spacing.

    Keeps max-pool argmax decisions stable under finite-difference probes.
    """
    n = int(np.prod(shape))
    values = (np.arange(n, dtype=np.float64) - n / 2.0) * spacing
    return rng.permutation(values).reshape(shape)
