"""Parameter containers shared by the tokenizer, encoder, decoder and predictor."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import Parameter, Tensor, layer_norm, linear, prelu, reglu_ffn, relu


class Module:
    """Holds named parameters and child modules in insertion order."""

    def __init__(self) -> None:
        self._params: Dict[str, Parameter] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, data: np.ndarray, trainable: bool = True) -> Parameter:
        p = Parameter(data, name=name, trainable=trainable)
        self._params[name] = p
        return p

    def alias_param(self, name: str, p: Parameter) -> None:
        self._params[name] = p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        """Yield ``(dotted_name, param)``; a parameter aliased under two names
        is yielded once, under the first."""
        seen = set()
        for name, p in self._iter(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def _iter(self, prefix: str) -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child._iter(f"{prefix}{cname}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                 zero: bool = False) -> None:
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero else uniform_init(rng, (d_in, d_out), d_in)
        self.weight = self.add_param("weight", w)
        self.bias: Optional[Parameter] = None
        if bias:
            b = np.zeros(d_out) if zero else uniform_init(rng, (d_out,), d_in)
            self.bias = self.add_param("bias", b)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int) -> None:
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(d))
        self.beta = self.add_param("beta", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def hidden_width(factor: float, d: int) -> int:
    h = int(round(factor * d))
    if h < 1:
        raise ValueError(f"intermediate width round({factor} * {d}) must be >= 1")
    return h


class ReGLU(Module):
    """Three-matrix gated FFN (up, gate, down). ``act`` is the gate
    nonlinearity: ``relu`` or ``prelu`` with one learned slope."""

    def __init__(self, rng: np.random.Generator, d: int, factor: float, bias: bool = True,
                 act: str = "relu") -> None:
        super().__init__()
        h = hidden_width(factor, d)
        self.hidden = h
        self.up = self.add_child("up", Linear(rng, d, h, bias))
        self.gate = self.add_child("gate", Linear(rng, d, h, bias))
        self.down = self.add_child("down", Linear(rng, h, d, bias))
        if act not in ("relu", "prelu"):
            raise ValueError(f"unknown FFN activation {act!r}")
        self.slope: Optional[Parameter] = self.add_param("slope", np.array([0.25])) if act == "prelu" else None

    def _act(self, x: Tensor) -> Tensor:
        return relu(x) if self.slope is None else prelu(x, self.slope)

    def __call__(self, x: Tensor, dropout_fn=None) -> Tensor:
        return reglu_ffn(x, self.up.weight, self.gate.weight, self.down.weight,
                         (self.up.bias, self.gate.bias, self.down.bias),
                         gate_act=self._act, dropout_fn=dropout_fn)
