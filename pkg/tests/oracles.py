"""Independent reference computations used across the test modules."""

import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def softmax_xent_np(logits, labels):
    """Straight-line mean cross-entropy, no shared code with the library."""
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += m + np.log(sum(np.exp(z - m) for z in row)) - row[y]
    return total / len(labels)


def adam_reference(grads, x0, step=0.04, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out longhand."""
    x, m, v = float(x0), 0.0, 0.0
    xs = []
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**k)
        vh = v / (1 - b2**k)
        x = x - step * mh / (vh**0.5 + eps)
        xs.append(x)
    return xs
