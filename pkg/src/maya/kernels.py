"""Row kernels used by the autodiff engine.

The compiled extension is used when it imports; otherwise the numpy versions
are used. Set ``MAYA_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MAYA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]), dtype=np.float64)


def layer_norm_fwd(x, gamma, beta, eps):
    """Normalize over the last axis. Returns ``(out, xhat, rstd)`` with the
    leading axes of ``x`` flattened in ``xhat``/``rstd``."""
    out, xhat, rstd = _impl.layer_norm_fwd(
        _rows(x), np.ascontiguousarray(gamma), np.ascontiguousarray(beta), float(eps)
    )
    return out.reshape(x.shape), xhat, rstd


def layer_norm_bwd(dy, xhat, rstd, gamma):
    dx, dgamma, dbeta = _impl.layer_norm_bwd(_rows(dy), xhat, rstd, np.ascontiguousarray(gamma))
    return dx.reshape(dy.shape), dgamma, dbeta


def softmax_fwd(x, mask=None):
    m = None
    if mask is not None:
        m = np.ascontiguousarray(np.broadcast_to(mask, x.shape).reshape(-1, x.shape[-1]), dtype=np.uint8)
    return _impl.softmax_fwd(_rows(x), m).reshape(x.shape)


def softmax_bwd(dy, y):
    return _impl.softmax_bwd(_rows(dy), _rows(y)).reshape(dy.shape)


def scatter_add_rows(shape, indices, rows):
    """Sum ``rows[i]`` into row ``indices[i]`` of a zero array of ``shape``."""
    out = np.zeros(shape, dtype=np.float64)
    flat_idx = np.ascontiguousarray(np.asarray(indices, dtype=np.int64).reshape(-1))
    return _impl.scatter_add_rows(out, flat_idx, _rows(rows))
