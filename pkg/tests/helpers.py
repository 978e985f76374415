import numpy as np


def fd_gradient(f, params, h=1e-5):
    """Central finite differences of scalar f() with respect to arrays modified in place."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6, rel_floor=0.0):
    """Largest elementwise |a - b| / max(|a|, |b|, floor), with floor raised to rel_floor * max|a|.

    The scaled floor keeps components that are zero up to round-off from dominating.
    """
    a = np.concatenate([g.reshape(-1) for g in analytic])
    b = np.concatenate([g.reshape(-1) for g in numeric])
    floor = max(floor, rel_floor * float(np.max(np.abs(a), initial=0.0)))
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
