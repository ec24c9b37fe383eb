"""Adam optimizer with a linear learning-rate decay schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class LinearDecay:
    """Decays the optimizer lr linearly from its base value to 0, no warmup."""

    def __init__(self, opt: Adam, total_steps: int):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.opt = opt
        self.base_lr = opt.lr
        self.total_steps = total_steps
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        frac = max(0.0, 1.0 - self.step_count / self.total_steps)
        self.opt.lr = self.base_lr * frac
