"""Adam with bias correction and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ShapeError
from .tensor import Parameter


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update of every parameter; all share the same step count."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.name not in grads:
            raise KeyError(f"no gradient for parameter {p.name!r}")
        if grads[p.name].shape != p.shape:
            raise ShapeError(f"gradient for {p.name} has shape {grads[p.name].shape}, parameter is {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        g = grads[p.name]
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class CosineSchedule:
    total_steps: int
    eta_max: float = 0.005
    eta_min: float = 0.0

    def __call__(self, t: int) -> float:
        return cosine_lr(self, t)


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    if schedule.total_steps < 1:
        raise ValueError(f"schedule needs total_steps >= 1, got {schedule.total_steps}")
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    frac = t / schedule.total_steps
    return schedule.eta_min + 0.5 * (schedule.eta_max - schedule.eta_min) * (1.0 + math.cos(math.pi * frac))
