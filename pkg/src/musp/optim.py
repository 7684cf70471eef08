"""Adam with L2 weight decay, plus the warmup / step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import Tensor
from .functional import ConfigError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """Update ``params`` in place and return the advanced state.

    Weight decay is added to the gradient before the moment estimates
    (``g + wd * p``). Parameters whose gradient is ``None`` still decay.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return state


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    warmup_start_lr: float = 3.5e-5
    decay_epochs: tuple[int, ...] = (30, 60)
    decay_factor: float = 0.1
    total_epochs: int = 90

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("schedule: warmup_epochs must lie in [0, total_epochs)")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("schedule: decay_factor must lie in (0, 1)")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for a (0-based) epoch: linear warmup, then step decay."""
    if epoch < schedule.warmup_epochs:
        frac = epoch / schedule.warmup_epochs
        return schedule.warmup_start_lr + (schedule.base_lr - schedule.warmup_start_lr) * frac
    passed = sum(1 for e in schedule.decay_epochs if epoch >= e)
    # dividing by 1/factor keeps "divided by 10" exact in binary floating point
    return schedule.base_lr / (1.0 / schedule.decay_factor) ** passed
