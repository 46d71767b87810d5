"""Adam and the two learning-rate schedules used for pretraining and fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, OptimizerError
from .tensorcore import Tensor

SCHEDULE_KINDS = ("exponential", "step_drop", "constant")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, lr_scales: Sequence[float] | None = None) -> None:
    """Bias-corrected Adam update, in place.

    All gradients are validated before any parameter is touched, so a
    non-finite gradient leaves the model unchanged.  A missing gradient is
    treated as zero.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise OptimizerError("params, grads and optimizer state have different lengths")
    checked = []
    for p, g, m in zip(params, grads, state.m):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape or m.shape != p.shape:
            raise OptimizerError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient")
        checked.append(g)
    if lr_scales is None:
        lr_scales = [1.0] * len(params)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for p, g, m, v, scale in zip(params, checked, state.m, state.v, lr_scales):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data -= (lr * scale) * step


class Adam:
    """Convenience wrapper holding parameters, per-parameter lr scales, and state."""

    def __init__(self, params: Sequence[Tensor], lr_scales: Sequence[float] | None = None, **kwargs):
        self.params = list(params)
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        self.state = AdamState.for_params(self.params, **kwargs)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.lr_scales)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class Schedule:
    kind: str = "exponential"
    base_lr: float = 1e-4
    gamma: float = 0.94
    drop_epoch: int = 5
    drop_factor: float = 10.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.drop_factor < 1:
            raise ConfigError(f"drop_factor must be >= 1, got {self.drop_factor}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for zero-indexed ``epoch``; step_drop lowers it from ``drop_epoch`` on."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if schedule.kind == "exponential":
        return schedule.base_lr * schedule.gamma**epoch
    if schedule.kind == "step_drop":
        return schedule.base_lr if epoch < schedule.drop_epoch else schedule.base_lr / schedule.drop_factor
    return schedule.base_lr
