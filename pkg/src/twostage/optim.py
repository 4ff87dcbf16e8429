"""Adaptive first-order optimizers over named parameter dicts (minimization)."""

from __future__ import annotations

import numpy as np


class RmsProp:
    """Gradient scaling by a decaying root-mean-square of past gradients."""

    def __init__(
        self,
        learning_rate: float = 0.01,
        decay: float = 0.9,
        eps: float = 1e-8,
        lr_overrides: dict[str, float] | None = None,
    ):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.lr_overrides = lr_overrides or {}
        self._ms: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            lr = self.lr_overrides.get(k, self.learning_rate)
            ms = self._ms.setdefault(k, np.zeros_like(params[k]))
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            params[k] -= lr * g / (np.sqrt(ms) + self.eps)


class Adam:
    """Bias-corrected first/second moment adaptive steps."""

    def __init__(
        self,
        learning_rate: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        lr_overrides: dict[str, float] | None = None,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_overrides = lr_overrides or {}
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            lr = self.lr_overrides.get(k, self.learning_rate)
            m = self._m.setdefault(k, np.zeros_like(params[k]))
            v = self._v.setdefault(k, np.zeros_like(params[k]))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(kind: str, learning_rate: float, lr_overrides: dict[str, float] | None = None):
    if kind == "rmsprop":
        return RmsProp(learning_rate=learning_rate, lr_overrides=lr_overrides)
    if kind == "adam":
        return Adam(learning_rate=learning_rate, lr_overrides=lr_overrides)
    raise ValueError(f"unknown optimizer: {kind!r}")
