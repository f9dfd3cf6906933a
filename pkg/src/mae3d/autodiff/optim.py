"""Adam with decoupled weight decay, and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np


class GradientBlowUp(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: OptimizerState, lr: float) -> None:
    """One in-place Adam update.

    ``params`` and ``grads`` map names to arrays; a ``None`` gradient leaves
    the parameter (and its moments) untouched. Weight decay is applied to the
    parameter directly, scaled by ``lr``.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise GradientBlowUp(f"gradient blow-up in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= (lr * state.weight_decay) * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(named_params)
        self.state = OptimizerState(base_lr=lr, weight_decay=weight_decay,
                                    beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, lr=None):
        lr = self.state.base_lr if lr is None else lr
        adam_step({n: p.data for n, p in self.params.items()},
                  {n: p.grad for n, p in self.params.items()}, self.state, lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("cosine schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))
