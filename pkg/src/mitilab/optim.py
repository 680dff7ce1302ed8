"""Xavier initialisation, AdamW and the step learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


def xavier_init(shape, rng: np.random.Generator) -> Tensor:
    """Glorot-uniform matrix in ``±sqrt(6 / (fan_in + fan_out))``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise ShapeError(f"xavier_init needs a 2-D shape, got {shape}")
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float | None = None) -> dict:
    """One decoupled-weight-decay Adam update; returns new parameter tensors.

    ``params`` and ``grads`` are keyed by parameter name. The decay shrinks
    ``θ`` by ``1 - lr*wd`` before the bias-corrected Adam step.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    decay = 1.0 - lr * state.weight_decay
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data * decay - lr * update
        out[name] = Tensor(new, requires_grad=p.requires_grad, name=p.name)
    return out


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_epochs: int
    drop_factor: float = 0.1
    drop_epoch_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if not 0.0 < self.drop_epoch_fraction < 1.0:
            raise ValueError("drop_epoch_fraction must lie strictly between 0 and 1")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")

    @property
    def drop_epoch(self) -> int:
        # round before flooring so 300 * 2/3 lands on 200, not 199
        return math.floor(round(self.total_epochs * self.drop_epoch_fraction, 9))


def lr_at(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.drop_epoch:
        return schedule.base_lr
    return schedule.base_lr * schedule.drop_factor


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-6)
        return {k: g * s for k, g in grads.items()}, total
    return grads, total
