"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def numeric_grad(f, arr, eps=1e-5):
    """Central-difference gradient of scalar f() w.r.t. arr (mutated in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric):
    """Max elementwise |a-n| / max(1, |a|, |n|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
