"""Optimizers and schedules used across the training phases.

SGD with momentum plus two adaptive-moment variants (coupled and decoupled
weight decay) mirror the sensitivity grid; the decoupled variant is the
default everywhere.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ArgumentError
from .numerics import Tensor


class Optimizer:
    """Base: parameter groups of {params: [Tensor], lr: float, weight_decay: float}."""

    def __init__(self, groups):
        if isinstance(groups, (list, tuple)) and groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups)}]
        self.groups = []
        for g in groups:
            self.groups.append(
                {
                    "params": list(g["params"]),
                    "lr": float(g.get("lr", 1e-3)),
                    "weight_decay": float(g.get("weight_decay", 0.0)),
                }
            )

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def scale_lr(self, factor: float, min_lr: float = 0.0):
        for g in self.groups:
            g["lr"] = max(g["lr"] * factor, min_lr)

    def set_lr(self, lr: float):
        for g in self.groups:
            g["lr"] = lr

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, groups, momentum: float = 0.9):
        super().__init__(groups)
        self.momentum = momentum
        self._velocity = {}

    def step(self):
        for g in self.groups:
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad + g["weight_decay"] * p.data
                v = self._velocity.get(id(p))
                v = grad if v is None else self.momentum * v + grad
                self._velocity[id(p)] = v
                p.data -= g["lr"] * v


class Adam(Optimizer):
    """Adam; weight decay, when set, is coupled (added to the gradient)."""

    decoupled = False

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(groups)
        self.b1, self.b2 = betas
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self):
        self._t += 1
        b1t = 1.0 - self.b1**self._t
        b2t = 1.0 - self.b2**self._t
        for g in self.groups:
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if g["weight_decay"] and not self.decoupled:
                    grad = grad + g["weight_decay"] * p.data
                m = self._m.get(id(p), np.zeros_like(p.data))
                v = self._v.get(id(p), np.zeros_like(p.data))
                m = self.b1 * m + (1 - self.b1) * grad
                v = self.b2 * v + (1 - self.b2) * grad * grad
                self._m[id(p)], self._v[id(p)] = m, v
                update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
                if g["weight_decay"] and self.decoupled:
                    update = update + g["weight_decay"] * p.data
                p.data -= g["lr"] * update


class AdamW(Adam):
    """Adam with decoupled weight decay."""

    decoupled = True


_OPTIMIZERS = {"sgd": SGD, "adam": Adam, "adamw": AdamW}


def make_optimizer(name: str, groups) -> Optimizer:
    try:
        return _OPTIMIZERS[name.lower()](groups)
    except KeyError:
        raise ArgumentError(f"unknown optimizer {name!r}; expected one of {sorted(_OPTIMIZERS)}") from None


class CosineSchedule:
    """Half-cosine interpolation from `start` to `end` over `total` steps."""

    def __init__(self, start: float, end: float, total: int):
        self.start, self.end, self.total = start, end, max(int(total), 1)

    def value(self, step: int) -> float:
        t = min(max(step, 0), self.total) / self.total
        return self.end + 0.5 * (self.start - self.end) * (1.0 + math.cos(math.pi * t))


class ReduceOnPlateau:
    """Multiply the optimizer lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, optimizer: Optimizer, patience: int, factor: float, min_lr: float = 0.0):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float):
        if metric < self.best - 1e-12:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.optimizer.scale_lr(self.factor, self.min_lr)
                self.bad_epochs = 0


class EarlyStopping:
    """Signal a stop after `patience` epochs without loss improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, metric: float) -> bool:
        if metric < self.best - 1e-12:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience
