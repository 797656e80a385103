"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Ops execute eagerly. While a :class:`Tape` is active (see :func:`recording`)
every op whose inputs carry gradients appends a backward rule; the rules are
stored in recording order, so replaying them reversed visits every node after
all of its consumers and gradient accumulation over shared subexpressions is
plain addition. Without an active tape the same functions are pure numpy
forward passes.

Everything is single-threaded and seedless, so identical inputs give
bit-identical forward values and gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .special import DomainError, digamma as _digamma_np, lgamma as _lgamma_np

__all__ = [
    "DomainError",
    "ShapeError",
    "Tensor",
    "Tape",
    "recording",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "lgamma",
    "clip",
    "tsum",
    "tmean",
    "gaussian_reparam_sample",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of backward rules for one forward computation."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Seed ``loss.grad`` with ones and replay rules in reverse order."""
        if loss.size != 1:
            raise ShapeError("backward expects a scalar loss")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for out, rule in reversed(self._entries):
            if out.grad is not None:
                rule(out.grad)


_tape: Optional[Tape] = None


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None):
    """Activate ``tape`` (a fresh one if omitted) for the duration of the block."""
    global _tape
    if tape is None:
        tape = Tape()
    prev = _tape
    _tape = tape
    try:
        yield tape
    finally:
        _tape = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], make_rule) -> Tensor:
    """Wrap ``out_data``; record ``make_rule(out)`` when gradients are live."""
    if _tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        _tape._entries.append((out, make_rule(out)))
        return out
    return Tensor(out_data)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.data.shape} with {b.data.shape}") from None


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def rule(out):
        def back(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

        return back

    return _emit(out_data, (a, b), rule)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def rule(out):
        def back(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return back

    return _emit(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def rule(out):
        def back(g):
            _accumulate(a, g)
            _accumulate(b, -g)

        return back

    return _emit(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def rule(out):
        def back(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return back

    return _emit(a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def rule(out):
        def back(g):
            _accumulate(a, g / b.data)
            _accumulate(b, -g * out.data / b.data)

        return back

    return _emit(out_data, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def rule(out):
        def back(g):
            _accumulate(a, -g)

        return back

    return _emit(-a.data, (a,), rule)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def rule(out):
        def back(g):
            _accumulate(a, g * out.data)

        return back

    return _emit(out_data, (a,), rule)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if a.size and np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")

    def rule(out):
        def back(g):
            _accumulate(a, g / a.data)

        return back

    return _emit(np.log(a.data), (a,), rule)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if a.size and np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative input")
    out_data = np.sqrt(a.data)

    def rule(out):
        def back(g):
            _accumulate(a, 0.5 * g / out.data)

        return back

    return _emit(out_data, (a,), rule)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def rule(out):
        def back(g):
            _accumulate(a, g * _expit(a.data))

        return back

    return _emit(out_data, (a,), rule)


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = _expit(a.data)

    def rule(out):
        def back(g):
            _accumulate(a, g * out.data * (1.0 - out.data))

        return back

    return _emit(out_data, (a,), rule)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def rule(out):
        def back(g):
            _accumulate(a, g * (1.0 - out.data * out.data))

        return back

    return _emit(out_data, (a,), rule)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    out_data = np.where(a.data > 0, a.data, slope * a.data)

    def rule(out):
        def back(g):
            _accumulate(a, g * np.where(a.data > 0, 1.0, slope))

        return back

    return _emit(out_data, (a,), rule)


def lgamma(a) -> Tensor:
    a = _as_tensor(a)
    out_data = _lgamma_np(a.data)

    def rule(out):
        def back(g):
            _accumulate(a, g * _digamma_np(a.data))

        return back

    return _emit(out_data, (a,), rule)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def rule(out):
        def back(g):
            _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

        return back

    return _emit(out_data, (a,), rule)


def tsum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(out):
        def back(g):
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.data.shape))
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(gk, a.data.shape))

        return back

    return _emit(out_data, (a,), rule)


def tmean(a) -> Tensor:
    """Mean over all elements, as a 0-d tensor."""
    a = _as_tensor(a)
    n = a.size

    def rule(out):
        def back(g):
            _accumulate(a, np.broadcast_to(g / n, a.data.shape))

        return back

    return _emit(a.data.mean(), (a,), rule)


def gaussian_reparam_sample(mu: Tensor, log_var: Tensor, rng: np.random.Generator) -> Tensor:
    """Sample ``mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)`` from ``rng``.

    Gradients flow to both ``mu`` and ``log_var``; the noise is a constant.
    """
    mu, log_var = _as_tensor(mu), _as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"gaussian_reparam_sample: shapes {mu.shape} != {log_var.shape}")
    eps = rng.standard_normal(size=mu.shape)
    return add(mu, mul(exp(mul(log_var, Tensor(0.5))), Tensor(eps)))
