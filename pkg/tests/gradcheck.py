"""Central finite-difference gradient checking."""

import numpy as np

STEP = 1e-5
FLOOR = 1e-6


def numeric_grads(loss_fn, arrays, h=STEP):
    """Central differences of ``loss_fn()`` w.r.t. every entry of every array (in place, restored)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn()
            flat[i] = keep - h
            down = loss_fn()
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def max_relative_error(analytic_list, numeric_list):
    return max(float(relative_error(a, n).max()) for a, n in zip(analytic_list, numeric_list))
