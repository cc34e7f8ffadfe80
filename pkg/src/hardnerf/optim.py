"""Adam with bias correction and per-parameter learning rates."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: dict[str, float] | float, betas=(0.9, 0.99), eps: float = 1e-15):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0

    def lr_for(self, name: str) -> float:
        if isinstance(self.lr, dict):
            return self.lr.get(name, self.lr.get("default"))
        return self.lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Update ``params`` in place. Returns False (and counts the event)
        if any gradient is non-finite, leaving parameters untouched."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr_for(name) / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        return True
