"""Inter-instance attention with label values.

Queries are instance representations, keys are the raw encoder outputs and
values are (projected) label embeddings. Similarity is the negative squared
L2 distance between projected query and key, scaled by ``1/sqrt(d)``.
During training the candidates are the other rows of the batch; at inference
they are the whole training split, held in a :class:`CandidateCache`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np

from .layers import LayerNorm, Linear, Module, ReGLU
from .tensor import (ContractError, Tensor, add, dropout, embedding_lookup, matmul, mul, no_grad,
                     pairwise_sq_dist, softmax)


class FingerprintError(RuntimeError):
    pass


class LabelEmbedding(Module):
    """Lookup table for classes, affine map for (standardized) regression targets."""

    def __init__(self, rng: np.random.Generator, d: int, task: str, num_classes: int = 0) -> None:
        super().__init__()
        self.task = task
        self.d = d
        if task == "regression":
            self.weight = self.add_param("weight", rng.uniform(-1.0, 1.0, size=(1, d)))
            self.bias = self.add_param("bias", rng.uniform(-1.0, 1.0, size=(d,)))
        else:
            self.num_classes = num_classes
            self.table = self.add_param("table", rng.normal(0.0, 1.0 / math.sqrt(d), size=(num_classes, d)))


def embed_labels(labels, lel: LabelEmbedding) -> Tensor:
    labels = np.asarray(labels)
    if lel.task == "regression":
        y = labels.astype(np.float64).reshape(-1, 1)
        if not np.all(np.isfinite(y)):
            raise ValueError("regression labels must be finite")
        return add(matmul(Tensor(y), lel.weight), lel.bias)
    return embedding_lookup(lel.table, labels.astype(np.int64), "label")


class IailBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, intermediate_factor: float, bias: bool = True,
                 act: str = "relu", qk_shared: bool = False, value_projection: bool = True,
                 dropout_rate: float = 0.0) -> None:
        super().__init__()
        self.d = d
        self.q = self.add_child("q", Linear(rng, d, d, bias))
        self.k = self.q if qk_shared else self.add_child("k", Linear(rng, d, d, bias))
        self.v = self.add_child("v", Linear(rng, d, d, bias)) if value_projection else None
        self.ffn = self.add_child("ffn", ReGLU(rng, d, intermediate_factor, bias, act))
        self.norm1 = self.add_child("norm1", LayerNorm(d))
        self.norm2 = self.add_child("norm2", LayerNorm(d))
        self.dropout_rate = dropout_rate
        self.qk_shared = qk_shared


def project_candidates(block: IailBlock, keys: Tensor, values: Tensor) -> Tuple[Tensor, Tensor]:
    return block.k(keys), (block.v(values) if block.v is not None else values)


def attend(q: Tensor, k_proj: Tensor, v_proj: Tensor, mask: Optional[np.ndarray] = None,
           return_probs: bool = False):
    """Softmax over ``-||q - k||^2 / sqrt(d)`` with already projected rows."""
    d = q.shape[-1]
    logits = mul(pairwise_sq_dist(q, k_proj), -1.0 / math.sqrt(d))
    probs = softmax(logits, axis=-1, mask=mask)
    out = matmul(probs, v_proj)
    return (out, probs.data) if return_probs else out


def l2_cross_attention(q: Tensor, keys: Tensor, values: Tensor, block: IailBlock,
                       mask: Optional[np.ndarray] = None, return_probs: bool = False):
    if keys.shape[0] < 1:
        raise ContractError("cross-attention needs at least one candidate")
    k_proj, v_proj = project_candidates(block, keys, values)
    return attend(block.q(q), k_proj, v_proj, mask, return_probs)


def _residual_ffn(x: Tensor, att: Tensor, block: IailBlock, training: bool,
                  rng: Optional[np.random.Generator]) -> Tensor:
    rate = block.dropout_rate
    a = block.norm1(add(x, dropout(att, rate, rng, training)))
    return block.norm2(add(a, dropout(block.ffn(a), rate, rng, training)))


def iail_forward(x: Tensor, keys: Tensor, values: Tensor, block: IailBlock, mask: Optional[np.ndarray] = None,
                 *, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Post-norm block: cross-attention residual, then FFN residual."""
    return _residual_ffn(x, l2_cross_attention(x, keys, values, block, mask), block, training, rng)


class Decoder(Module):
    def __init__(self, rng: np.random.Generator, d: int, num_layers: int, task: str, num_classes: int,
                 intermediate_factor: float = 1.0, bias: bool = True, act: str = "relu",
                 qk_shared: bool = False, dropout_rate: float = 0.0, use_labels: bool = True,
                 mask_self: bool = True, value_projection: bool = True) -> None:
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_decoder_layers must be >= 1")
        self.lel = self.add_child("lel", LabelEmbedding(rng, d, task, num_classes))
        self.blocks = [self.add_child(f"blocks.{i}", IailBlock(rng, d, intermediate_factor, bias, act, qk_shared,
                                                                value_projection, dropout_rate))
                       for i in range(num_layers)]
        self.use_labels = use_labels
        self.mask_self = mask_self


def decoder_forward_train(z0: Tensor, labels: np.ndarray, decoder: Decoder, *, training: bool = True,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
    """Candidates are the batch itself. Keys are ``z0`` at every layer; the
    query of layer l is the output of layer l-1. With ``mask_self`` a row never
    sees its own candidate."""
    b = z0.shape[0]
    mask = None
    if decoder.mask_self:
        if b < 2:
            raise ContractError("self-masked decoder needs a batch of at least 2")
        mask = np.eye(b, dtype=bool)
    values = embed_labels(labels, decoder.lel) if decoder.use_labels else z0
    x = z0
    for block in decoder.blocks:
        x = iail_forward(x, z0, values, block, mask, training=training, rng=rng)
    return x


@dataclass
class CandidateCache:
    z0: np.ndarray  # [n_train, d] encoder outputs
    y_emb: np.ndarray  # [n_train, d] label embeddings
    fingerprint: str

    @property
    def n(self) -> int:
        return self.z0.shape[0]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"fingerprint": self.fingerprint, "n_train": self.n, "d": int(self.z0.shape[1])}
        (d / "cache.meta").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
        self.z0.astype("<f8").tofile(d / "cache.z0.f64")
        self.y_emb.astype("<f8").tofile(d / "cache.y.f64")

    @classmethod
    def load(cls, directory) -> "CandidateCache":
        d = Path(directory)
        meta = json.loads((d / "cache.meta").read_text(encoding="utf-8"))
        shape = (meta["n_train"], meta["d"])
        z0 = np.fromfile(d / "cache.z0.f64", dtype="<f8").astype(np.float64)
        y = np.fromfile(d / "cache.y.f64", dtype="<f8").astype(np.float64)
        if z0.size != shape[0] * shape[1] or y.size != z0.size:
            raise FingerprintError("candidate cache files are truncated")
        return cls(z0.reshape(shape), y.reshape(shape), meta["fingerprint"])

    def check(self, fingerprint: str) -> None:
        if self.fingerprint != fingerprint:
            raise FingerprintError(f"candidate cache fingerprint {self.fingerprint} != expected {fingerprint}")


def build_candidate_cache(encode: Callable[[np.ndarray, np.ndarray], np.ndarray], lel: LabelEmbedding,
                          x_num: np.ndarray, x_cat: np.ndarray, labels: np.ndarray, fingerprint: str,
                          batch_size: int = 1024) -> CandidateCache:
    """Run ``encode`` (eval mode) over the training rows in fixed order."""
    n = len(labels)
    if n < 1:
        raise ContractError("candidate cache needs at least one training row")
    parts = [encode(x_num[s:s + batch_size], x_cat[s:s + batch_size]) for s in range(0, n, batch_size)]
    with no_grad():
        y_emb = embed_labels(labels, lel).data
    return CandidateCache(np.concatenate(parts, axis=0), y_emb, fingerprint)


def decoder_forward_infer(z_hat: np.ndarray, cache: CandidateCache, decoder: Decoder,
                          chunk: int = 512) -> np.ndarray:
    """Every query attends over the full cache at every layer; rows are
    processed independently, so results do not depend on batch composition."""
    if cache.n < 1:
        raise ContractError("candidate cache is empty")
    z_hat = np.asarray(z_hat.data if isinstance(z_hat, Tensor) else z_hat, dtype=np.float64)
    with no_grad():
        keys = Tensor(cache.z0)
        values = Tensor(cache.y_emb if decoder.use_labels else cache.z0)
        projected = [project_candidates(block, keys, values) for block in decoder.blocks]
        outs = []
        for s in range(0, z_hat.shape[0], chunk):
            x = Tensor(z_hat[s:s + chunk])
            for block, (kp, vp) in zip(decoder.blocks, projected):
                x = _residual_ffn(x, attend(block.q(x), kp, vp), block, False, None)
            outs.append(x.data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, z_hat.shape[1]))
