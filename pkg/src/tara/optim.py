"""First-order optimizers over named Matrix parameters."""

from __future__ import annotations

import numpy as np

from .numerics import Matrix


class Sgd:
    """Plain gradient descent, optional classical momentum."""

    def __init__(self, lr: float, momentum: float = 0.0) -> None:
        if lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Matrix], grads: dict[str, Matrix]) -> dict[str, Matrix]:
        out = {}
        for name, w in params.items():
            g = grads[name].array
            if self.momentum:
                v = self._velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self._velocity[name] = v
            else:
                v = g
            out[name] = Matrix(w.array - self.lr * v)
        return out


class Adam:
    """Adam with bias correction; defaults are the standard ones."""

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        if lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, Matrix], grads: dict[str, Matrix]) -> dict[str, Matrix]:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, w in params.items():
            g = grads[name].array
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - b1**self._t)
            v_hat = v / (1 - b2**self._t)
            out[name] = Matrix(w.array - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def make_optimizer(kind: str, lr: float, momentum: float = 0.0):
    if kind == "sgd":
        return Sgd(lr, momentum)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
