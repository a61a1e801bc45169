"""AdamW with decoupled weight decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if self.weight_decay and self.lr:
                p.data *= 1.0 - self.lr * self.weight_decay
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self._m, self._v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out
