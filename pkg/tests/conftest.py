"""Shared test helpers: finite-difference gradient oracle."""

import numpy as np


def numeric_grad(forward, x, h=1e-3):
    """Central finite differences of a scalar-valued closure w.r.t. the
    float32 buffer `x`, accumulated in float64. `forward` re-reads `x`."""
    g = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(forward())
        flat[i] = orig - h
        fm = float(forward())
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def rel_error(a, b, floor=1e-8):
    """Norm-relative difference, robust when either side is near zero."""
    na = float(np.linalg.norm(np.asarray(a, dtype=np.float64)))
    nb = float(np.linalg.norm(np.asarray(b, dtype=np.float64)))
    diff = float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
    return diff / max(na, nb, floor)
