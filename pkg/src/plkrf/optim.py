"""AdamW with a linear-warmup cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor


def cosine_lr(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear ramp 0 -> ``base_lr`` over ``warmup`` steps, then cosine to 0 at ``total``."""
    if step < 0:
        raise ConfigError("schedule step must be non-negative")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    base_lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    warmup: int = 2500
    total_steps: int = 500_000
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        """Learning rate used by update number ``step`` (1-based; defaults to the next one)."""
        return cosine_lr(self.step + 1 if step is None else step, self.base_lr, self.warmup, self.total_steps)


def decays(name: str, param: Tensor) -> bool:
    """Weight decay applies to matrices and kernels, not biases, gains or gamma."""
    return param.ndim >= 2


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float | None = None) -> float:
    """One AdamW update in place; returns the learning rate used.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` before the Adam step.
    Parameters without a gradient entry are left untouched.
    """
    if state.step < 0:
        raise ConfigError("optimizer step counter must be non-negative")
    t = state.step + 1
    if lr is None:
        lr = state.lr(t)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if lr == 0.0:
            continue
        if state.weight_decay and decays(name, p):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return lr
