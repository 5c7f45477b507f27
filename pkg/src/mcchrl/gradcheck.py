"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to array x (in place)."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, 1) — scale-aware relative error."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(f, arrays, analytic_grads, eps: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    f: zero-argument callable returning the scalar objective; it must read the
    arrays in `arrays` so that in-place perturbation is visible.
    Returns the max relative error over all entries of all arrays.
    """
    worst = 0.0
    for x, g in zip(arrays, analytic_grads):
        num = finite_diff_grad(f, x, eps)
        worst = max(worst, max_rel_error(g, num))
    return worst
