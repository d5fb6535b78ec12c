"""Optimizers and the learning-rate schedule.

Both optimizers operate on dicts of named float64 arrays and mutate the
parameter dict in place. Only keys present in `grads` are touched, so a
sparse update (e.g. just the sampled path's weights) leaves everything
else untouched, slot state included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ops import check_finite


@dataclass
class SgdMomentumState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(params: dict, grads: dict, state: SgdMomentumState, lr: float) -> None:
    """v <- mu*v + g + lambda*w;  w <- w - lr*v  (L2 added to the gradient)."""
    for key, g in grads.items():
        w = params[key]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {w.shape} for {key}")
        v = state.velocity.get(key)
        if v is None:
            v = np.zeros_like(w)
        v = state.momentum * v + g + state.weight_decay * w
        w = w - lr * v
        check_finite(w, f"updated param {key}")
        state.velocity[key] = v
        params[key] = w


@dataclass
class AdamState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, no weight decay."""
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    for key, g in grads.items():
        w = params[key]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {w.shape} for {key}")
        m = state.m.get(key, np.zeros_like(w))
        v = state.v.get(key, np.zeros_like(w))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        w = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        check_finite(w, f"updated param {key}")
        state.m[key] = m
        state.v[key] = v
        params[key] = w


def cosine_lr(round_index: int, total_rounds: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * t / T)) / 2."""
    if total_rounds < 1:
        raise ValueError("total_rounds must be >= 1")
    if not 0 <= round_index <= total_rounds:
        raise ValueError(f"round {round_index} out of [0, {total_rounds}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * round_index / total_rounds))
