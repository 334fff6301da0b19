"""Pure-numpy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Inputs are 2-D C-contiguous float64 arrays laid out as ``(rows, width)``.
"""

import numpy as np


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    width = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / width
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / width
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    return dx, dgamma, dbeta


def softmax_fwd(x, mask):
    """Row softmax; ``mask`` is a uint8 array (1 = excluded) or None."""
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = mask == 0
        big = np.where(keep, x, -np.inf).max(axis=1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, x, 0.0) - big), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(dy, y):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def scatter_add_rows(out, indices, rows):
    np.add.at(out, indices, rows)
    return out
