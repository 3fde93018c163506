"""Optimizers over :class:`Parameter` lists."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import AutodiffError, Parameter


class MissingGradientError(AutodiffError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    schedule: str = "cosine"  # "cosine" or "constant"
    min_lr: float = 0.0

    def __post_init__(self):
        if self.name not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def cosine_lr(base: float, step: int, total: int, min_lr: float = 0.0) -> float:
    if total <= 1:
        return base
    frac = min(step, total - 1) / (total - 1)
    return min_lr + 0.5 * (base - min_lr) * (1.0 + math.cos(math.pi * frac))


class Optimizer:
    """Stateful optimizer; frozen parameters are always skipped untouched."""

    def __init__(self, params, config: OptimizerConfig = OptimizerConfig(), total_steps: int = 0):
        self.params: list[Parameter] = list(params)
        self.config = config
        self.total_steps = total_steps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        c = self.config
        if c.schedule == "constant" or self.total_steps <= 0:
            return c.lr
        return cosine_lr(c.lr, self.step_count, self.total_steps, c.min_lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        c = self.config
        lr = self.current_lr()
        t = self.step_count + 1
        for i, p in enumerate(self.params):
            if p.frozen:
                continue
            if p.grad is None:
                raise MissingGradientError(f"parameter {p.name!r} has no gradient")
            g = p.grad.astype(np.float64)
            w = p.data.astype(np.float64)
            if c.name == "sgd":
                if c.momentum:
                    self._m[i] = c.momentum * self._m[i] + g
                    g = self._m[i]
                if c.weight_decay and p.ndim >= 2:
                    g = g + c.weight_decay * w
                w = w - lr * g
            else:
                b1, b2 = c.betas
                self._m[i] = b1 * self._m[i] + (1 - b1) * g
                self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
                mhat = self._m[i] / (1 - b1 ** t)
                vhat = self._v[i] / (1 - b2 ** t)
                if c.weight_decay and p.ndim >= 2:
                    w = w * (1 - lr * c.weight_decay)
                w = w - lr * mhat / (np.sqrt(vhat) + c.eps)
            p.data[...] = w.astype(p.dtype)
        self.step_count = t


def optimizer_step(params, config: OptimizerConfig = OptimizerConfig()) -> None:
    """One stateless update (fresh moments); use :class:`Optimizer` for training loops."""
    Optimizer(params, config).step()
