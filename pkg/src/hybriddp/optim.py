"""First-order optimizers over a flat parameter vector, plus LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .errors import ConfigurationError, ShapeError
from .model import GradVector, ModelParams, Scope

OptimizerKind = Literal["sgd", "momentum", "rmsprop", "adam", "yogi"]

DEFAULTS = {
    "sgd": {},
    "momentum": {"momentum": 0.9},
    "rmsprop": {"rho": 0.9, "eps": 1e-8},
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "yogi": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
}


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_steps: int
    kind: Literal["cosine", "constant"] = "cosine"

    def __post_init__(self):
        if not self.base_lr > 0 or self.total_steps < 1:
            raise ConfigurationError("schedule needs base_lr > 0 and total_steps >= 1")
        if self.kind not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: Schedule, t: int) -> float:
    """Half-cosine decay from base_lr at t = 0 to 0 at t = T; t > T clamps to T."""
    if schedule.kind == "constant":
        return schedule.base_lr
    t = min(max(t, 0), schedule.total_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / schedule.total_steps))


@dataclass
class OptimizerState:
    kind: OptimizerKind
    scope: Scope
    hyper: dict
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


def make_optimizer(kind: OptimizerKind, scope: Scope, size: int, **hyper) -> OptimizerState:
    if kind not in DEFAULTS:
        raise ConfigurationError(f"unknown optimizer {kind!r}")
    unknown = set(hyper) - set(DEFAULTS[kind])
    if unknown:
        raise ConfigurationError(f"{kind} does not take {sorted(unknown)}")
    h = {**DEFAULTS[kind], **hyper}
    m = np.zeros(size) if kind in ("momentum", "adam", "yogi") else None
    v = np.zeros(size) if kind in ("rmsprop", "adam", "yogi") else None
    return OptimizerState(kind, scope, h, m, v)


def _step(state: OptimizerState, g: np.ndarray, lr: float) -> tuple[np.ndarray, OptimizerState]:
    """Return the parameter delta and the next state."""
    h, t = state.hyper, state.step + 1
    m, v = state.m, state.v
    if state.kind == "sgd":
        delta = -lr * g
    elif state.kind == "momentum":
        m = h["momentum"] * m + g
        delta = -lr * m
    elif state.kind == "rmsprop":
        v = h["rho"] * v + (1 - h["rho"]) * g * g
        delta = -lr * g / (np.sqrt(v) + h["eps"])
    else:
        b1, b2 = h["beta1"], h["beta2"]
        m = b1 * m + (1 - b1) * g
        g2 = g * g
        if state.kind == "adam":
            v = b2 * v + (1 - b2) * g2
        else:
            v = v - (1 - b2) * np.sign(v - g2) * g2
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        delta = -lr * m_hat / (np.sqrt(v_hat) + h["eps"])
    return delta, replace(state, m=m, v=v, step=t)


def apply_update(params: ModelParams, grad: GradVector, state: OptimizerState,
                 lr: float) -> tuple[ModelParams, OptimizerState]:
    """One optimizer step on the parameters in ``grad.scope``; others are copied through."""
    if grad.scope != state.scope:
        raise ShapeError(f"gradient scope {grad.scope!r} != optimizer scope {state.scope!r}")
    idx = params.layout.scope_indices(state.scope)
    if grad.values.shape != idx.shape:
        raise ShapeError(f"gradient has {grad.values.shape[0]} entries, scope has {len(idx)}")
    delta, state = _step(state, np.asarray(grad.values, dtype=np.float64), lr)
    values = params.values.copy()
    values[idx] += delta
    return ModelParams(params.config, values), state


@dataclass(frozen=True)
class OptimizerSpec:
    """Config-level description of one phase's optimizer."""

    kind: OptimizerKind = "adam"
    lr: float = 1e-3
    schedule: Literal["cosine", "constant"] = "cosine"
    hyper: dict = field(default_factory=dict)

    def build(self, scope: Scope, size: int) -> OptimizerState:
        return make_optimizer(self.kind, scope, size, **self.hyper)

    def schedule_for(self, total_steps: int) -> Schedule:
        return Schedule(self.lr, max(1, total_steps), self.schedule)
