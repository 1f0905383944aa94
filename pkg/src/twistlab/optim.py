"""Update rules and schedules: SGD with momentum, LARS, cosine annealing, EMA.

Parameters, gradients and optimizer buffers are dicts of float64 arrays
keyed by parameter name; every update mutates the arrays in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass
class SgdMomentumState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise InvalidInputError("weight_decay must be non-negative")


@dataclass(frozen=True)
class LarsConfig:
    trust_coefficient: float = 0.001
    weight_decay: float = 1.5e-6
    exclude_bias_and_bn: bool = True

    def __post_init__(self):
        if self.trust_coefficient <= 0.0:
            raise InvalidInputError("trust_coefficient must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    base_value: float
    final_value: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise InvalidInputError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidInputError("warmup_steps must be in [0, total_steps)")


def cosine_value(s: ScheduleConfig, step: int) -> float:
    """Linear warmup from 0, then cosine annealing from base to final."""
    if not 0 <= step <= s.total_steps:
        raise InvalidInputError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base_value * step / s.warmup_steps
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.final_value + 0.5 * (s.base_value - s.final_value) * (1.0 + math.cos(math.pi * progress))


def is_excluded(name: str) -> bool:
    """Biases and batch-norm parameters skip LARS adaptation and weight decay."""
    return name.endswith(".bias") or ".bn." in name


def _check_shapes(params: dict, grads: dict):
    if params.keys() != grads.keys():
        raise InvalidInputError("parameter and gradient names differ")
    for k, p in params.items():
        if p.shape != grads[k].shape:
            raise InvalidInputError(f"shape mismatch for {k}: {p.shape} vs {grads[k].shape}")


def _momentum_update(name, p, step_dir, state: SgdMomentumState, lr):
    v = state.velocity.get(name)
    if v is None:
        v = state.velocity[name] = np.zeros_like(p)
    if v.shape != p.shape:
        raise InvalidInputError(f"velocity shape mismatch for {name}")
    v *= state.momentum
    v += step_dir
    p -= lr * v


def sgd_momentum_step(params: dict, grads: dict, state: SgdMomentumState, lr: float):
    """v <- m*v + g + wd*p ; p <- p - lr*v (coupled L2 decay)."""
    _check_shapes(params, grads)
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        _momentum_update(name, p, g, state, lr)


def lars_local_rate(p: np.ndarray, g: np.ndarray, trust: float, weight_decay: float) -> float:
    p_norm = float(np.linalg.norm(p))
    g_norm = float(np.linalg.norm(g))
    if p_norm > 0.0 and g_norm > 0.0:
        return trust * p_norm / (g_norm + weight_decay * p_norm)
    return 1.0


def lars_step(params: dict, grads: dict, cfg: LarsConfig, lr: float, state: SgdMomentumState):
    """Layer-wise adaptive rate scaling on top of SGD with momentum.

    Each non-excluded tensor's update is ``rate * (g + wd*p)`` with
    ``rate = trust * |p| / (|g| + wd*|p|)``. Excluded tensors get a plain
    momentum step with no decay. ``state.weight_decay`` is ignored; the
    decay comes from ``cfg``.
    """
    _check_shapes(params, grads)
    for name, p in params.items():
        g = grads[name]
        if cfg.exclude_bias_and_bn and is_excluded(name):
            _momentum_update(name, p, g, state, lr)
            continue
        rate = lars_local_rate(p, g, cfg.trust_coefficient, cfg.weight_decay)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        _momentum_update(name, p, rate * g, state, lr)


@dataclass
class EmaState:
    """Teacher parameters tracking a student by exponential moving average."""

    params: dict
    momentum: float = 0.99

    @classmethod
    def from_student(cls, student_params: dict, momentum: float = 0.99) -> "EmaState":
        return cls({k: v.copy() for k, v in student_params.items()}, momentum)


def ema_update(teacher: EmaState, student_params: dict, m: float | None = None) -> EmaState:
    """t <- m*t + (1-m)*s for every tensor, in place."""
    m = teacher.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise InvalidInputError("EMA momentum must lie in [0, 1]")
    _check_shapes(teacher.params, student_params)
    for name, t in teacher.params.items():
        t[...] = m * t + (1.0 - m) * student_params[name]
    return teacher


def ema_momentum(start: float, end: float, step: int, total_steps: int) -> float:
    """Cosine ramp of the EMA momentum from ``start`` to ``end``."""
    if total_steps <= 0:
        return end
    step = min(max(step, 0), total_steps)
    return end - (end - start) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
