"""Adaptive-moment (Adam) parameter updates for the training loops."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter

__all__ = ["Adam", "OptimizerError"]


class OptimizerError(RuntimeError):
    """A step was requested in an inconsistent optimizer state."""


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(
        self,
        params,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.params: list[Parameter] = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise OptimizerError(f"parameter '{p.name}' has no gradient")
            if p.grad.shape != p.data.shape:
                raise OptimizerError(
                    f"parameter '{p.name}' gradient shape {p.grad.shape} "
                    f"does not match data shape {p.data.shape}"
                )
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.clear_grad()
