"""Parameter update rules operating in place on leaf tensors."""

from __future__ import annotations

import numpy as np


class SGD:
    def step(self, params, grads, lr: float) -> None:
        for p, g in zip(params, grads):
            if g is not None:
                p.data -= lr * g


class Adam:
    """Adam with bias correction; state is keyed by parameter position."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: list = []
        self.v: list = []

    def step(self, params, grads, lr: float) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str):
    if name == "adam":
        return Adam()
    if name == "sgd":
        return SGD()
    raise ValueError(f"unknown optimizer {name!r}")
