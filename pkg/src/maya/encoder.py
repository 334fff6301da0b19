"""Multi-branch attention encoder.

Each block runs ``n`` independent multi-head self-attention branches over the
same input. Every branch output goes through one shared ReGLU FFN and its own
LayerNorm; the branches are then mixed with simplex weights ``W_B``, added to
the block input and normalized again. The encoder output is the LayerNorm of
the mean [CLS] state over all blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .layers import LayerNorm, Module, ReGLU, uniform_init
from .tensor import (ContractError, Tensor, add, cross_entropy, dropout, getitem, layer_norm, matmul, mse, mul,
                     no_grad, reshape, softmax, sum_, transpose)

SIMPLEX_TOL = 1e-9


class BranchAttention(Module):
    """``n`` independent multi-head self-attention branches, stored stacked:
    each projection weight has shape ``[n, d, d]`` and slice ``j`` belongs to
    branch ``j`` only."""

    def __init__(self, rng: np.random.Generator, d: int, num_heads: int, num_branch: int,
                 bias: bool = True) -> None:
        super().__init__()
        if d % num_heads:
            raise ValueError(f"hidden_size {d} is not divisible by num_heads {num_heads}")
        if num_branch < 1:
            raise ValueError("num_branch must be >= 1")
        self.d = d
        self.n = num_branch
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.weights, self.biases = {}, {}
        for role in "qkvo":
            self.weights[role] = self.add_param(f"{role}.weight", uniform_init(rng, (num_branch, d, d), d))
            if bias:
                self.biases[role] = self.add_param(f"{role}.bias", uniform_init(rng, (num_branch, 1, d), d))

    def project(self, role: str, x: Tensor) -> Tensor:
        out = matmul(x, self.weights[role])
        b = self.biases.get(role)
        return out if b is None else add(out, b)


def branch_attention(x: Tensor, attn: BranchAttention, capture_maps: bool = False, *, dropout_rate: float = 0.0,
                     rng: Optional[np.random.Generator] = None,
                     training: bool = False) -> Tuple[Tensor, Optional[np.ndarray]]:
    """Scaled dot-product self-attention in every branch at once.

    ``x`` is ``[B, T, d]``; returns ``[n, B, T, d]`` and, when asked, the
    post-softmax maps ``[n, B, heads, T, T]`` (row 0 is the [CLS] query).
    """
    b, t, d = x.shape
    if d != attn.d:
        raise ValueError(f"attention expects width {attn.d}, got {d}")
    n, h, hd = attn.n, attn.num_heads, attn.head_dim
    flat = reshape(x, (b * t, d))

    def heads(z: Tensor) -> Tensor:
        return transpose(reshape(z, (n, b, t, h, hd)), (0, 1, 3, 2, 4))

    q, k, v = (heads(attn.project(r, flat)) for r in "qkv")
    scores = mul(matmul(q, transpose(k, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(hd))
    probs = softmax(scores, axis=-1)
    maps = probs.data.copy() if capture_maps else None
    probs = dropout(probs, dropout_rate, rng, training)
    ctx = reshape(transpose(matmul(probs, v), (0, 1, 3, 2, 4)), (n, b * t, d))
    return reshape(attn.project("o", ctx), (n, b, t, d)), maps


class MbaBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, num_heads: int, num_branch: int,
                 intermediate_factor: float, bias: bool = True) -> None:
        super().__init__()
        self.attn = self.add_child("attn", BranchAttention(rng, d, num_heads, num_branch, bias))
        self.ffn = self.add_child("ffn", ReGLU(rng, d, intermediate_factor, bias))
        # per-branch LayerNorm affine, stacked like the attention weights
        self.branch_gamma = self.add_param("branch_norm.gamma", np.ones((num_branch, 1, 1, d)))
        self.branch_beta = self.add_param("branch_norm.beta", np.zeros((num_branch, 1, 1, d)))
        self.out_norm = self.add_child("out_norm", LayerNorm(d))
        self._unit = (Tensor(np.ones(d)), Tensor(np.zeros(d)))

    @property
    def n(self) -> int:
        return self.attn.n


def _check_simplex(w: np.ndarray, n: int) -> None:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"branch weights {w} are not a point on the {n}-simplex")


def mba_forward(x: Tensor, block: MbaBlock, weights: Sequence[float], *, dropout_rate: float = 0.0,
                rng: Optional[np.random.Generator] = None, training: bool = False,
                capture_maps: bool = False):
    """Returns ``(y, branch_outputs, maps)`` where ``branch_outputs`` is the
    stacked ``[n, B, T, d]`` tensor of ``LayerNorm_j(FFN(Attention_j(x) + x))``."""
    _check_simplex(weights, block.n)
    ffn_drop = (lambda z: dropout(z, dropout_rate, rng, training)) if dropout_rate > 0 else None
    att, maps = branch_attention(x, block.attn, capture_maps, dropout_rate=dropout_rate, rng=rng,
                                 training=training)
    hidden = block.ffn(add(att, x), dropout_fn=ffn_drop)
    normed = layer_norm(hidden, *block._unit)
    outs = add(mul(normed, block.branch_gamma), block.branch_beta)
    w = Tensor(np.asarray(weights, dtype=np.float64).reshape(-1, 1, 1, 1))
    mixed = sum_(mul(outs, w), axis=0)
    return block.out_norm(add(mixed, x)), outs, maps


@dataclass
class BranchWeightState:
    """EMA-smoothed softmax of per-branch losses; a buffer, never a parameter."""

    n: int
    momentum: float = 0.9
    enabled: bool = True
    temperature: float = 1.0
    invert: bool = False
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.weights is None:
            self.weights = np.full(self.n, 1.0 / self.n)
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def current(self) -> np.ndarray:
        return self.weights if self.enabled else np.full(self.n, 1.0 / self.n)

    def raw(self, losses: np.ndarray) -> np.ndarray:
        s = np.asarray(losses, dtype=np.float64) / self.temperature
        if self.invert:
            s = -s
        e = np.exp(s - s.max())
        return e / e.sum()

    def update(self, losses: np.ndarray) -> np.ndarray:
        if self.enabled:
            self.weights = self.momentum * self.weights + (1.0 - self.momentum) * self.raw(losses)
        return self.current


def branch_losses(branch_cls: Sequence[np.ndarray], labels: np.ndarray,
                  predictor: Callable[[Tensor], Tensor], loss_kind: str) -> np.ndarray:
    """Supervised loss of the shared predictor on each branch's [CLS] row,
    evaluated off the tape."""
    out = []
    with no_grad():
        for cls in branch_cls:
            pred = predictor(Tensor(cls))
            if loss_kind == "ce":
                out.append(cross_entropy(pred, labels).item())
            elif loss_kind == "mse":
                out.append(mse(pred, labels).item())
            else:
                raise ValueError(f"unknown loss kind {loss_kind!r}")
    return np.array(out)


def update_branch_weights(state: BranchWeightState, branch_cls: Sequence[np.ndarray], labels: np.ndarray,
                          predictor: Callable[[Tensor], Tensor], loss_kind: str,
                          training: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """One EMA step of ``W_B`` from this step's branch outputs. Returns the
    new weights and the per-branch losses."""
    if not training:
        raise ContractError("branch weights are frozen at inference")
    s = branch_losses(branch_cls, labels, predictor, loss_kind)
    return state.update(s), s


@dataclass
class EncoderOutput:
    z_hat: Tensor  # [B, d]
    block_cls: List[Tensor]  # per block, [B, d]
    branch_cls: List[List[np.ndarray]]  # per block, per branch, [B, d]
    maps: Optional[List[np.ndarray]] = None  # per block, [n, B, heads, T, T]
    branch_cls_t: Optional[List[Tensor]] = None  # per block, [n, B, d], on the tape


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, d: int, num_layers: int, num_heads: int, num_branch: int,
                 intermediate_factor: float, bias: bool = True, dropout_rate: float = 0.0,
                 ema_momentum: float = 0.9, branch_weights_enabled: bool = True,
                 branch_softmax_temp: float = 1.0, invert_branch_scores: bool = False) -> None:
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.blocks = [self.add_child(f"blocks.{i}", MbaBlock(rng, d, num_heads, num_branch, intermediate_factor, bias))
                       for i in range(num_layers)]
        self.norm = self.add_child("norm", LayerNorm(d))
        self.dropout_rate = dropout_rate
        self.weight_states = [BranchWeightState(num_branch, ema_momentum, branch_weights_enabled,
                                                branch_softmax_temp, invert_branch_scores)
                              for _ in range(num_layers)]


def encoder_forward(tokens: Tensor, encoder: Encoder, *, training: bool = False,
                    rng: Optional[np.random.Generator] = None, capture_maps: bool = False) -> EncoderOutput:
    """Apply every block in order and average the block [CLS] states; the
    tokenizer output itself is not part of the average."""
    x = tokens
    block_cls, branch_cls, branch_t, all_maps = [], [], [], []
    for block, state in zip(encoder.blocks, encoder.weight_states):
        x, outs, maps = mba_forward(x, block, state.current, dropout_rate=encoder.dropout_rate, rng=rng,
                                    training=training, capture_maps=capture_maps)
        block_cls.append(getitem(x, (slice(None), 0)))
        rows = getitem(outs, (slice(None), slice(None), 0))
        branch_t.append(rows)
        branch_cls.append(list(rows.data))
        all_maps.append(maps)
    avg = block_cls[0]
    for c in block_cls[1:]:
        avg = add(avg, c)
    if len(block_cls) > 1:
        avg = mul(avg, 1.0 / len(block_cls))
    return EncoderOutput(encoder.norm(avg), block_cls, branch_cls, all_maps if capture_maps else None, branch_t)
