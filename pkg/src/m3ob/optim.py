"""Adam with decoupled L2 penalty."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor


class Adam:
    """Adam whose weight penalty is applied outside the adaptive update.

    Each step does ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + l2_penalty * p)``.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        learning_rate: float = 1e-4,
        l2_penalty: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.l2_penalty = l2_penalty
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g is None:
                raise ValueError(f"parameter {p.name or p.shape} has no gradient")
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.name} {p.data.shape}")
        self.step_count += 1
        t = self.step_count
        lr = self.learning_rate
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.first, self.second):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.l2_penalty * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.first, self.second)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out
