"""AdamW with decoupled weight decay and a warm-restart cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Tensor


class Param(Tensor):
    """A trainable leaf tensor carrying its AdamW moment buffers."""

    __slots__ = ("first_moment", "second_moment", "step_count")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.first_moment = np.zeros_like(self.data)
        self.second_moment = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> Tensor:
        return self

    def assign(self, data) -> None:
        data = np.asarray(data, dtype=self.data.dtype)
        if data.shape != self.data.shape:
            raise ValueError(f"cannot assign shape {data.shape} to parameter {self.name} of shape {self.shape}")
        self.data = data.copy()

    def reset_state(self) -> None:
        self.first_moment = np.zeros_like(self.data)
        self.second_moment = np.zeros_like(self.data)
        self.step_count = 0


def adamw_step(
    params: Iterable[Param],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One AdamW update, then clear the gradients."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adamw_step: parameter {p.name or f'#{i}'} has no gradient")
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.first_moment *= beta1
        p.first_moment += (1.0 - beta1) * g
        p.second_moment *= beta2
        p.second_moment += (1.0 - beta2) * g * g
        m_hat = p.first_moment / (1.0 - beta1**t)
        v_hat = p.second_moment / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


@dataclass
class LrSchedule:
    base_lr: float = 5e-4
    min_lr: float = 0.0
    period: int = 32
    epoch: int = 0

    def lr(self, epoch: int | None = None) -> float:
        return cosine_lr(self, self.epoch if epoch is None else epoch)

    def step(self) -> float:
        """Advance one epoch and return the new rate."""
        self.epoch += 1
        return self.lr()


def cosine_lr(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    phase = (epoch % schedule.period) / schedule.period
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * phase))
