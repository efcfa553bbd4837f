"""Adam with an L2 gradient penalty, step-decay schedule, Gaussian init."""

from __future__ import annotations

import math
from decimal import Decimal
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-5,
) -> AdamState:
    """One in-place Adam update.

    The penalty ``weight_decay * param`` is folded into the gradient before
    the moment updates (coupled L2, not decoupled decay).
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("params, grads and optimizer state are misaligned")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ConfigError(f"shape mismatch for {p.name}: param {p.shape}, grad {g.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def lr_at(epoch: int, base_lr: float = 1e-3, decay: float = 0.1, every: int = 3) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    # decimal arithmetic on the written values keeps 1e-3 -> 1e-4 -> 1e-5 exact
    return float(Decimal(repr(base_lr)) * Decimal(repr(decay)) ** (epoch // every))


def init_gaussian(shape, mean: float = 0.0, std: float = 0.1, seed=None) -> np.ndarray:
    """Seeded N(mean, std^2) draw; ``seed`` may also be a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = tuple(shape)
    if std == 0:
        return np.full(shape, float(mean))
    return rng.normal(mean, std, size=shape)


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))
