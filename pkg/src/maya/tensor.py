"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the model needs are provided. Each op computes its output
eagerly and records a closure that maps the output gradient to input
gradients; :func:`backward` replays those closures in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels

LN_EPS = 1e-5

_grad_enabled = True
_dropout_disabled = False


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def dropout_disabled():
    global _dropout_disabled
    prev = _dropout_disabled
    _dropout_disabled = True
    try:
        yield
    finally:
        _dropout_disabled = prev


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop."""

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def backward(self) -> None:
        backward(self)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], bwd, op: str) -> Tensor:
    # one reduction: any NaN/inf element makes the sum non-finite; only an
    # overflowing sum of finite values needs the elementwise check
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(data, axis=None)
    if not np.isfinite(total) and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=bwd, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``b`` may be a 2-D weight applied to the last axis of ``a``, or both may
    share leading batch axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    if bd.ndim == 2:
        def bwd(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def bwd(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb
    return _make(out, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(i) for i in axes) if axes is not None and len(axes) else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bwd(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), bwd, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast_to")


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bwd, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis) * (1.0 / float(n))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Leaky ReLU with a learned slope broadcast against ``a``."""
    ad, sd = a.data, slope.data
    pos = ad > 0

    def bwd(g):
        ga = np.where(pos, g, g * sd)
        gs = _unbroadcast(np.where(pos, 0.0, g * ad), sd.shape)
        return ga, gs

    return _make(np.where(pos, ad, ad * sd), (a, slope), bwd, "prelu")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax. ``mask`` marks excluded entries (True = drop);
    every row must keep at least one entry."""
    if axis not in (-1, x.ndim - 1):
        moved = transpose(x, _move_last(x.ndim, axis))
        out = softmax(moved, -1, None if mask is None else np.moveaxis(mask, axis, -1))
        return transpose(out, np.argsort(_move_last(x.ndim, axis)))
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if np.any(mask.all(axis=-1)):
            raise ContractError("softmax row has every entry masked")
    y = kernels.softmax_fwd(x.data, mask)
    return _make(y, (x,), lambda g: (kernels.softmax_bwd(g, y),), "softmax")


def _move_last(ndim: int, axis: int) -> List[int]:
    axis = axis % ndim
    return [i for i in range(ndim) if i != axis] + [axis]


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis (biased variance), then scale and shift."""
    out, xhat, rstd = kernels.layer_norm_fwd(x.data, gamma.data, beta.data, eps)

    def bwd(g):
        dx, dgamma, dbeta = kernels.layer_norm_bwd(g, xhat, rstd, gamma.data)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd, "layer_norm")


def embedding_lookup(table: Tensor, indices, feature: str = "embedding") -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"{feature}: index {bad} out of range for table of size {n}")
    shape = table.shape

    def bwd(g):
        return (kernels.scatter_add_rows(shape, idx, g),)

    return _make(table.data[idx], (table,), bwd, "embedding_lookup")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def reglu_ffn(x: Tensor, w_up: Tensor, w_gate: Tensor, w_down: Tensor,
              biases: Optional[Sequence[Optional[Tensor]]] = None,
              gate_act: Callable[[Tensor], Tensor] = relu,
              dropout_fn: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    """``(x W_up * act(x W_gate)) W_down`` with optional biases (up, gate, down)."""
    b_up, b_gate, b_down = biases if biases is not None else (None, None, None)
    hidden = mul(linear(x, w_up, b_up), gate_act(linear(x, w_gate, b_gate)))
    if dropout_fn is not None:
        hidden = dropout_fn(hidden)
    return linear(hidden, w_down, b_down)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training or inside :func:`dropout_disabled`."""
    if not training or rate <= 0.0 or _dropout_disabled:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def pairwise_sq_dist(q: Tensor, k: Tensor) -> Tensor:
    """Squared Euclidean distances between rows: ``[B, d] x [M, d] -> [B, M]``."""
    qd, kd = q.data, k.data
    out = (qd * qd).sum(1)[:, None] + (kd * kd).sum(1)[None, :] - 2.0 * qd @ kd.T

    def bwd(g):
        gq = 2.0 * (g.sum(1)[:, None] * qd - g @ kd)
        gk = 2.0 * (g.sum(0)[:, None] * kd - g.T @ qd)
        return gq, gk

    return _make(out, (q, k), bwd, "pairwise_sq_dist")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under row ``logits``."""
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("cross_entropy got non-finite logits")
    t = np.asarray(targets, dtype=np.int64)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    n = z.shape[0]
    nll = logsum - shifted[np.arange(n), t]

    def bwd(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(nll.mean()), (logits,), bwd, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    if not (np.all(np.isfinite(pred.data)) and np.all(np.isfinite(t))):
        raise FloatingPointError("mse got non-finite input")
    diff = pred.data - t
    n = diff.size
    return _make(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def topo_order(root: Tensor) -> List[Tensor]:
    """Recorded tensors reachable from ``root``, inputs before consumers."""
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> Dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

    Returns gradients for ``params`` keyed by name (zeros for parameters the
    loss does not touch).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    out: Dict[str, np.ndarray] = {}
    for p in params or ():
        out[p.name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


def grad_check_detailed(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
                        n_coords: int = 64, seed: int = 0) -> Dict[str, float]:
    """Compare analytic gradients with central differences, per parameter.

    ``f`` re-evaluates the scalar objective from the current parameter values.
    At most ``n_coords`` coordinates per parameter are probed, chosen by a
    seeded generator. Error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    rng = np.random.default_rng(seed)
    with dropout_disabled():
        for p in params:
            p.grad = None
        loss = f()
        again = f()
        if loss.data.item() != again.data.item():
            raise ContractError("objective is not deterministic")
        backward(loss)
        result: Dict[str, float] = {}
        with no_grad():
            for p in params:
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                flat = p.data.reshape(-1)
                size = flat.size
                coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
                worst = 0.0
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + eps
                    up = f().data.item()
                    flat[c] = orig - eps
                    down = f().data.item()
                    flat[c] = orig
                    numeric = (up - down) / (2.0 * eps)
                    err = abs(analytic.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, err)
                result[p.name] = worst
    return result


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
               n_coords: int = 64, seed: int = 0) -> float:
    """Maximum relative gradient error over the sampled coordinates."""
    errs = grad_check_detailed(f, params, eps, n_coords, seed)
    return max(errs.values(), default=0.0)
