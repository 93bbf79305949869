"""Shared oracles: an independent central-difference gradient and the
relative-error reduction used across the gradient suites."""

import numpy as np
import pytest


def fd_gradient(fn, arr):
    """Central differences of a scalar-valued fn() w.r.t. a raw array it
    closes over, step 1e-4 scaled by |x| + 1. Kept independent of the
    package's own checker on purpose."""
    flat = arr.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        h = 1e-4 * (abs(keep) + 1.0)
        flat[i] = keep + h
        hi = fn()
        flat[i] = keep - h
        lo = fn()
        flat[i] = keep
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(arr.shape)


def max_rel_err(a, b, floor=1e-3):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
