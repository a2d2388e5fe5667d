"""Optimizers, gradient clipping and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet


class SGD:
    def __init__(self, params: ParamSet):
        self.params = params

    def step(self, lr: float) -> None:
        lrf = np.float32(lr)
        for name, v in self.params.items():
            v -= lrf * self.params.grad(name)


class Adam:
    """Adam with bias correction; moment state lives with the optimizer
    and survives weight syncs (FedAvg overwrites values only)."""

    def __init__(self, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1 = np.float32(beta1)
        self.beta2 = np.float32(beta2)
        self.eps = np.float32(eps)
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = np.float32(1.0 / (1.0 - float(b1) ** self.t))
        c2 = np.float32(1.0 / (1.0 - float(b2) ** self.t))
        lrf = np.float32(lr)
        one = np.float32(1.0)
        for name, v in self.params.items():
            g = self.params.grad(name)
            m = self.m[name]
            vv = self.v[name]
            m *= b1
            m += (one - b1) * g
            vv *= b2
            vv += (one - b2) * g * g
            v -= lrf * (m * c1) / (np.sqrt(vv * c2) + self.eps)

    def state_arrays(self):
        for d in (self.m, self.v):
            yield from d.values()


def make_optimizer(kind: str, params: ParamSet):
    if kind == "sgd":
        return SGD(params)
    if kind == "adam":
        return Adam(params)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def clip_gradients(params: ParamSet, max_norm: float = 1.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the scale that was applied (1.0 when under the limit).
    """
    norm = params.global_grad_norm()
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    s = np.float32(scale)
    for name in params.names():
        params.grad(name)[...] *= s
    return scale


SCHEDULE_KINDS = ("warmup-cosine", "warmup-cosine-annealing", "warmup-constant")


@dataclass(frozen=True)
class Schedule:
    kind: str
    max_lr: float
    warmup: int
    total: int
    period: int | None = None  # annealing restart length, rounds

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "warmup-cosine-annealing" and not self.period:
            raise ValueError("warmup-cosine-annealing needs a period")


def lr_at(schedule: Schedule, round_: int) -> float:
    """Learning rate at a round: linear warmup to max_lr, then the
    schedule's decay shape. Continuous at the warmup boundary."""
    if not 0 <= round_ <= schedule.total:
        raise ValueError(f"round {round_} outside [0, {schedule.total}]")
    w = schedule.warmup
    if w > 0 and round_ < w:
        return schedule.max_lr * round_ / w
    if schedule.kind == "warmup-constant":
        return schedule.max_lr
    t = round_ - w
    if schedule.kind == "warmup-cosine":
        span = max(schedule.total - w, 1)
        return schedule.max_lr * 0.5 * (1.0 + np.cos(np.pi * t / span))
    # warmup-cosine-annealing: the cosine restarts every period rounds
    span = schedule.period
    return schedule.max_lr * 0.5 * (1.0 + np.cos(np.pi * (t % span) / span))
