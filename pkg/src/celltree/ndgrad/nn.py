"""Layers used by the tree model: linear maps and 1-d batch normalization."""

from __future__ import annotations

from typing import Iterator, List

import numpy as np

from .tensor import Tensor, add, div, leaky_relu, matmul, mul, sqrt, sub, tsum

__all__ = ["DegenerateBatchError", "Module", "Linear", "BatchNorm1d", "kaiming_uniform"]

LEAKY_SLOPE = 0.01


class DegenerateBatchError(ValueError):
    """Batch statistics requested on fewer than two rows."""


class Module:
    """Minimal parameter container with a train/eval switch."""

    def __init__(self):
        self.training = True

    def _modules(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def parameters(self) -> List[Tensor]:
        params = [v for v in vars(self).values() if isinstance(v, Tensor) and v.requires_grad]
        for child in self._modules():
            params.extend(child.parameters())
        return params

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._modules():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Kaiming-uniform init matched to the LeakyReLU slope used everywhere."""
    bound = np.sqrt(6.0 / ((1.0 + LEAKY_SLOPE**2) * fan_in))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Tensor(kaiming_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        return out


class BatchNorm1d(Module):
    """Per-column normalization with learned scale/shift and running stats.

    Train mode normalizes by the batch mean and biased batch variance and
    updates the running statistics with momentum 0.1 (running variance uses
    the unbiased estimate). Eval mode normalizes by the running statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if self.training:
            if n < 2:
                raise DegenerateBatchError("batchnorm needs at least 2 rows in train mode")
            mean = div(tsum(x, axis=0), Tensor(float(n)))
            centered = sub(x, mean)
            var = div(tsum(mul(centered, centered), axis=0), Tensor(float(n)))
            xhat = div(centered, sqrt(add(var, Tensor(self.eps))))
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean.data
            self.running_var = (1.0 - m) * self.running_var + m * var.data * n / (n - 1)
        else:
            denom = np.sqrt(self.running_var + self.eps)
            xhat = div(sub(x, Tensor(self.running_mean)), Tensor(denom))
        return add(mul(xhat, self.scale), self.shift)
