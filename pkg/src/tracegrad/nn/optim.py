"""First-order optimizers over ``{key: array}`` parameter dicts."""
from __future__ import annotations

import math

import numpy as np


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0):
        lr = self.lr * lr_scale
        for key, p in params.items():
            g = grads[key]
            if self.momentum:
                v = self._velocity.get(key)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[key] = v
                g = v
            p -= lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        lr = self.lr * lr_scale * corr
        for key, p in params.items():
            g = grads[key]
            m = self._m.get(key)
            v = self._v.get(key)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self._m[key], self._v[key] = m, v
            p -= lr * m / (np.sqrt(v) + self.eps * math.sqrt(1.0 - b2 ** self.t))


def make_optimizer(cfg: dict):
    name = cfg.get("name", "adam")
    if name == "sgd":
        return SGD(cfg["lr"], cfg.get("momentum", 0.0))
    if name == "adam":
        return Adam(cfg["lr"], cfg.get("beta1", 0.9), cfg.get("beta2", 0.999), cfg.get("eps", 1e-8))
    raise ValueError(f"unknown optimizer {name!r}")


def cosine_scale(step: int, total: int) -> float:
    """Cosine annealing multiplier from 1 down to 0 over ``total`` steps."""
    if total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
