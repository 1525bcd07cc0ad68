"""Adam optimizer with bias correction and per-parameter state."""

from __future__ import annotations

import numpy as np

from ..errors import OptimizerError


class Adam:
    """Standard Adam. Only trainable parameters are updated; frozen ones are
    skipped entirely, and a trainable parameter without a gradient is an error
    (it means the training graph silently dropped it)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        for p in self.params:
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                raise OptimizerError(f"trainable parameter {p.name!r} has no gradient")
            name = p.name
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.tensor.data)
                v = np.zeros_like(p.tensor.data)
            else:
                v = self._v[name]
            t = self._t.get(name, 0) + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            step_lr = lr * getattr(p, "lr_scale", 1.0)
            p.tensor.data = p.tensor.data - step_lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self._m[name] = m
            self._v[name] = v
            self._t[name] = t


def linear_lr(step, total_steps, lr_start, lr_end):
    """Learning rate decayed linearly from lr_start to lr_end over training."""
    if total_steps <= 1:
        return lr_start
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_start + (lr_end - lr_start) * frac
