"""AdamW with decoupled weight decay, and the warmup/linear-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError, ScheduleRangeError, ShapeError


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr):
    """Apply one AdamW update to ``params`` in place and advance ``state``.

    ``params`` and ``grads`` map parameter names to arrays of equal shape.
    Weight decay is applied to the weights directly (scaled by ``lr``), not
    folded into the gradient.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape for {name!r}", g.shape, params[name].shape)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        if state.weight_decay:
            theta *= 1.0 - lr * state.weight_decay
        theta -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 3e-5
    floor_lr: float = 1e-7
    warmup_fraction: float = 0.10
    total_steps: int = 0

    def __post_init__(self):
        if self.floor_lr > self.peak_lr:
            raise ConfigError("floor_lr must not exceed peak_lr")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie strictly between 0 and 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")

    @property
    def warmup_steps(self):
        """Integer warmup boundary (rounded, kept inside ``[1, total-1]``)."""
        if self.total_steps <= 1:
            return self.total_steps
        w = int(round(self.warmup_fraction * self.total_steps))
        return min(max(w, 1), self.total_steps - 1)


def _lerp(a, b, t):
    # exact at both ends: t=0 gives a, t=1 gives b
    return a * (1.0 - t) + b * t


def lr_at(schedule, step):
    """Learning rate at optimizer step ``step`` (0-based)."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ScheduleRangeError(f"step {step} outside [0, {total}]")
    warm = schedule.warmup_steps
    if warm == 0:
        return schedule.floor_lr
    if step <= warm:
        return _lerp(schedule.floor_lr, schedule.peak_lr, step / warm)
    return _lerp(schedule.peak_lr, schedule.floor_lr, (step - warm) / (total - warm))


def steps_per_epoch(n_items, batch_size):
    return math.ceil(n_items / batch_size)
