"""Feature tokenizer: one d-dimensional token per feature plus a leading [CLS]."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .layers import Module, uniform_init
from .tensor import Tensor, add, broadcast_to, concat, embedding_lookup, mul, prelu, relu, reshape

ACTIVATIONS = ("none", "relu", "prelu")


class FeatureTokenizer(Module):
    """Numerical feature j becomes ``x_j * W_j + b_j``; categorical feature j
    becomes ``E_j[idx] + b_j``. All feature tokens go through the activation;
    the [CLS] row does not.

    Categorical tables are stored as one stacked table with per-feature row
    offsets; index 0 of every feature is its UNKNOWN row.
    """

    def __init__(self, rng: np.random.Generator, n_num: int, cat_cardinalities: Sequence[int],
                 d: int, activation: str = "relu") -> None:
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown tokenizer activation {activation!r}")
        self.n_num = n_num
        self.cat_cardinalities = list(cat_cardinalities)
        self.d = d
        self.activation = activation
        k = n_num + len(self.cat_cardinalities)
        if k < 1:
            raise ValueError("tokenizer needs at least one feature")
        if n_num:
            self.num_weight = self.add_param("num_weight", uniform_init(rng, (n_num, d), d))
            self.num_bias = self.add_param("num_bias", uniform_init(rng, (n_num, d), d))
        if self.cat_cardinalities:
            total = int(sum(self.cat_cardinalities))
            self.cat_offsets = np.concatenate([[0], np.cumsum(self.cat_cardinalities)[:-1]]).astype(np.int64)
            self.cat_table = self.add_param("cat_embeddings", uniform_init(rng, (total, d), d))
            self.cat_bias = self.add_param("cat_bias", uniform_init(rng, (len(self.cat_cardinalities), d), d))
        self.cls = self.add_param("cls", uniform_init(rng, (d,), d))
        if activation == "prelu":
            # one slope per feature token stream
            self.slope = self.add_param("prelu_slope", np.full((k, 1), 0.25))

    @property
    def k(self) -> int:
        return self.n_num + len(self.cat_cardinalities)

    def __call__(self, x_num: np.ndarray, x_cat: np.ndarray) -> Tensor:
        """``[B, n_num], [B, n_cat] -> [B, k+1, d]`` with [CLS] at row 0."""
        x_num = np.asarray(x_num, dtype=np.float64)
        x_cat = np.asarray(x_cat, dtype=np.int64)
        b = x_num.shape[0] if self.n_num else x_cat.shape[0]
        parts: List[Tensor] = []
        if self.n_num:
            if x_num.ndim != 2 or x_num.shape[1] != self.n_num:
                raise ValueError(f"expected {self.n_num} numerical features, got shape {x_num.shape}")
            parts.append(add(mul(Tensor(x_num[:, :, None]), self.num_weight), self.num_bias))
        if self.cat_cardinalities:
            if x_cat.ndim != 2 or x_cat.shape[1] != len(self.cat_cardinalities):
                raise ValueError(f"expected {len(self.cat_cardinalities)} categorical features, got {x_cat.shape}")
            for j, card in enumerate(self.cat_cardinalities):
                col = x_cat[:, j]
                if col.size and (col.min() < 0 or col.max() >= card):
                    bad = col[(col < 0) | (col >= card)][0]
                    raise IndexError(f"categorical feature {j}: index {bad} out of range [0, {card})")
            emb = embedding_lookup(self.cat_table, x_cat + self.cat_offsets[None, :], "categorical")
            parts.append(add(emb, self.cat_bias))
        feats = parts[0] if len(parts) == 1 else concat(parts, axis=1)
        if self.activation == "relu":
            feats = relu(feats)
        elif self.activation == "prelu":
            feats = prelu(feats, self.slope)
        cls = broadcast_to(reshape(self.cls, (1, 1, self.d)), (b, 1, self.d))
        return concat([cls, feats], axis=1)
