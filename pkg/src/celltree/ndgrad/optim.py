"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["MissingGradientError", "AdamState", "Adam"]


class MissingGradientError(RuntimeError):
    """step() called while some parameter has no populated gradient."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


class Adam:
    """Bias-corrected Adam; weight decay is applied to the parameter directly
    (``p -= lr * wd * p``) before the moment update, not folded into the
    gradient."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 0.001,
        weight_decay: float = 1e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.states: List[AdamState] = [
            AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise MissingGradientError("parameter has no gradient; run backward first")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, s in zip(self.params, self.states):
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            g = p.grad
            s.m *= b1
            s.m += (1.0 - b1) * g
            s.v *= b2
            s.v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (s.m / bias1) / (np.sqrt(s.v / bias2) + self.eps)
