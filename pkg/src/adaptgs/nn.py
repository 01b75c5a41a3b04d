"""Minimal parameter containers: Module, Linear, MLP."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, gelu, relu

ACTIVATIONS = {"relu": relu, "gelu": gelu}


class Module:
    """Parameter holder; attributes that are tensors, modules or lists of modules are traversed."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False,
                 gain: float = 1.0):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in)
        self.w = param(w)
        self.b = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class MLP(Module):
    """Stack of Linear layers with an activation between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, act: str = "relu",
                 zero_last: bool = False, last_gain: float = 1.0):
        n = len(sizes) - 1
        gain_hidden = np.sqrt(2.0) if act == "relu" else 1.0
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng,
                   zero=zero_last and i == n - 1,
                   gain=last_gain if i == n - 1 else gain_hidden)
            for i in range(n)
        ]
        self._act = ACTIVATIONS[act]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x
