"""Decoupled-weight-decay adaptive-moment optimizer and warmup schedule."""

from __future__ import annotations

from typing import Iterable, List

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay; state kept per parameter tensor."""

    def __init__(self, params: Iterable[Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def set_lr(self, lr: float) -> None:
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay != 0.0:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class WarmupSchedule:
    """Linear ramp over the first fraction of steps, then constant."""

    def __init__(self, base_lr: float, total_steps: int, warmup_frac: float = 0.06):
        self.base_lr = base_lr
        self.warmup_steps = max(1, int(round(warmup_frac * total_steps)))

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        return self.base_lr
