"""Adam optimizer over named parameter dicts, with simple LR schedules."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}
        self._t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self._t
        bias2 = 1.0 - b2**self._t
        for name, g in grads.items():
            p = self.params[name]
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def epoch_lr(base_lr: float, epoch: int, schedule: str) -> float:
    """Learning rate for a given zero-based epoch.

    'constant' keeps base_lr; 'decimate' divides by ten every epoch.
    """
    if schedule == "constant":
        return base_lr
    if schedule == "decimate":
        return base_lr * (0.1**epoch)
    raise ValueError(f"unknown schedule {schedule!r}")
