"""Adam with decoupled weight decay and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


@dataclass
class OptimizerState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    lr: float = 2e-4


def adam_init(params: list[Tensor], lr: float = 2e-4) -> OptimizerState:
    return OptimizerState([np.zeros_like(p.data) for p in params],
                          [np.zeros_like(p.data) for p in params], 0, lr)


def adam_step(params: list[Tensor], state: OptimizerState, lr: float, weight_decay: float = 0.0,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update; weight decay is applied to the parameter, not the gradient.

    Parameters whose ``grad`` is None raise; callers zero-fill unused ones.
    """
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    missing = [p.name or str(i) for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[:5]}")
    b1, b2 = betas
    state.step += 1
    state.lr = lr
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= lr * (update + weight_decay * p.data)


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    if total <= 0:
        raise ValueError("cosine_lr: total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total}]")
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total)))
