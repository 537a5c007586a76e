"""Decoupled adaptive-moment optimizer (AdamW) with bias correction."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


def adamw_update(p, g, m, v, step: int, lr: float, beta1: float, beta2: float, eps: float, weight_decay: float = 0.0):
    """One AdamW step for a single array; ``step`` counts from 1.  Returns ``(p, m, v)``."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    p = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return p, m, v


class AdamW:
    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            new_p, self.m[k], self.v[k] = adamw_update(
                p.data, g, self.m[k], self.v[k], self.step_count, lr, self.beta1, self.beta2, self.eps, self.weight_decay
            )
            p.data[...] = new_p

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, step_count: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(step_count)
        for k in self.params:
            self.m[k] = np.array(arrays[f"opt.m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(arrays[f"opt.v.{k}"], dtype=self.v[k].dtype)
