"""Adam and exponential moving averages over lists of numpy arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction; updates arrays in place.

    ``betas=(0, 0.999)`` (no first-moment smoothing) is the default used for
    both the teacher and the distillation networks.
    """

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.0, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.step_count += 1
        k = self.step_count
        c1 = 1.0 - self.beta1**k
        c2 = 1.0 - self.beta2**k
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EMA:
    """Shadow copy ``s <- decay * s + (1 - decay) * p``.

    With ``warmup`` the decay used at update ``k`` is
    ``min(decay, (1 + k) / (10 + k))``, so the shadow forgets its starting
    point quickly and only then settles into a long average.
    """

    def __init__(self, params: list[np.ndarray], decay: float, warmup: bool = False):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.decay = float(decay)
        self.warmup = bool(warmup)
        self.count = 0
        self.shadow = [p.copy() for p in params]

    def current_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1.0 + self.count) / (10.0 + self.count))

    def update(self, params: list[np.ndarray]) -> None:
        decay = self.current_decay()
        self.count += 1
        for s, p in zip(self.shadow, params):
            if decay == 0.0:
                s[...] = p
            else:
                s *= decay
                s += (1.0 - decay) * p
