"""Adam and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FrozenParameterError, NumericalError
from .tensor import Tensor


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient in adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a fixed list of :class:`Tensor` parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = OptimizerState.zeros_like([p.data for p in self.params],
                                               beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        frozen = [i for i, p in enumerate(self.params) if p.frozen]
        if frozen:
            raise FrozenParameterError(f"refusing to update {len(frozen)} frozen parameter(s)")
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr if lr is None else lr)


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"  # constant | cyclic
    base_lr: float = 3e-4
    max_lr: float = 3e-4
    cycle_length: int = 4000

    def __post_init__(self):
        if self.kind not in ("constant", "cyclic"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0 or self.max_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be at least 2 steps")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based).

    The cyclic kind is triangular: ``base_lr`` at the start of each cycle,
    ``max_lr`` at the half-cycle point, linear in between.
    """
    if step < 0:
        raise ValueError("step must be nonnegative")
    if schedule.kind == "constant":
        return schedule.base_lr
    half = schedule.cycle_length / 2.0
    pos = step % schedule.cycle_length
    frac = pos / half if pos <= half else (schedule.cycle_length - pos) / half
    return schedule.base_lr + (schedule.max_lr - schedule.base_lr) * frac
