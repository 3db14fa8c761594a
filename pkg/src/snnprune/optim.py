"""Base weight optimizers and learning-rate schedules (numpy, in-place)."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.reset()

    def reset(self):
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> tuple[dict, list]:
        return {"name": "adam", "t": self.t, "lr": self.lr}, self.m + self.v

    def load(self, meta: dict, arrays: list):
        self.t = meta["t"]
        self.lr = meta["lr"]
        n = len(self.params)
        self.m = [a.copy() for a in arrays[:n]]
        self.v = [a.copy() for a in arrays[n:2 * n]]


class SGD:
    """SGD with momentum and L2 weight decay."""

    def __init__(self, params, lr=0.05, momentum=0.9, weight_decay=5e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.reset()

    def reset(self):
        self.t = 0
        self.buf = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        for p, g, b in zip(self.params, grads, self.buf):
            d = g + self.weight_decay * p if self.weight_decay else g
            b *= self.momentum
            b += d
            p -= self.lr * b

    def state(self) -> tuple[dict, list]:
        return {"name": "sgd", "t": self.t, "lr": self.lr}, list(self.buf)

    def load(self, meta: dict, arrays: list):
        self.t = meta["t"]
        self.lr = meta["lr"]
        self.buf = [a.copy() for a in arrays[:len(self.params)]]


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine annealing from ``base`` to 0 over ``total`` steps."""
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))
