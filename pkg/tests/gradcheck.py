"""Central finite-difference helpers for float64 gradient checks."""

import numpy as np

STEP = 1e-6
REL_TOL = 1e-4


def numeric_grad(f, x, step=STEP):
    """d f / d x for scalar ``f`` by central differences, perturbing ``x`` in place."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f()
        flat[i] = keep - step
        down = f()
        flat[i] = keep
        gf[i] = (up - down) / (2 * step)
    return g


def rel_error(analytic, numeric, floor=1e-5):
    """Largest absolute deviation relative to the larger gradient magnitude.

    Gradients smaller than ``floor`` are compared absolutely, since
    finite differences of an O(1) loss carry roughly 1e-10 of noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)
