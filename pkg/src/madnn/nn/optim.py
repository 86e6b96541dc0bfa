from __future__ import annotations

import numpy as np

from .layers import Parameter


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam. Moments live on each :class:`Parameter`."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, nan_guard: bool = True):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.nan_guard = nan_guard

    def step(self, params=None):
        """Update ``params`` (default: all) that hold a gradient."""
        targets = self.params if params is None else params
        if self.nan_guard:
            for p in targets:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NonFiniteGradient("non-finite gradient encountered")
        for p in targets:
            if p.grad is None:
                continue
            adam_update(p, p.grad, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_update(p: Parameter, grad: np.ndarray, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    p.step += 1
    p.m *= beta1
    p.m += (1 - beta1) * grad
    p.v *= beta2
    p.v += (1 - beta2) * grad * grad
    m_hat = p.m / (1 - beta1 ** p.step)
    v_hat = p.v / (1 - beta2 ** p.step)
    p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
