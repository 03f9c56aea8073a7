"""Shared numerical oracles for the test suite."""

import numpy as np

from styleshift.autodiff import Var, mul, sum_axes


def fd_grad(fn, x, step=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def weighted_sum(out_var: Var, weights) -> Var:
    """Scalar probe sum(w * out) used to seed backward passes."""
    s = sum_axes(mul(out_var, np.asarray(weights, dtype=np.float64)),
                 tuple(range(out_var.value.ndim)), keepdims=False)
    return s
