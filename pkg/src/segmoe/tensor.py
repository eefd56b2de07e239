"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a gradient-requiring tensor records its parents
and a backward closure; ``Tensor.backward()`` replays the implicit graph in
reverse topological order and accumulates gradients into ``.grad`` buffers.
All arithmetic is 64-bit and single-threaded per graph, so identical inputs
give bit-identical outputs.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = ["Tensor", "no_grad", "make_op", "tensor", "param", "zeros", "ones"]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# per-thread so independent models may run on independent threads
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference / oracles)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over broadcast dimensions so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array participating in an autodiff graph.

    ``data`` is row-major float64; ``grad`` (same shape) is populated by
    ``backward()`` on every reachable tensor with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # ------------------------------------------------------------------ #
    # basics

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    # ------------------------------------------------------------------ #
    # graph machinery

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into leaf grads."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.data.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    # ------------------------------------------------------------------ #
    # arithmetic

    def __add__(self, other):
        other = _as_tensor(other)
        return make_op(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        return make_op(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data

        def back(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return g / b.data, -g * a.data / (b.data * b.data)

        return make_op(out, (a, b), back)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return make_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported; use exp/ln")
        p = float(exponent)
        out = self.data**p
        return make_op(out, (self,), lambda g: (g * p * self.data ** (p - 1.0),))

    def matmul(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        out = a.data @ b.data

        def back(g):
            return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

        return make_op(out, (a, b), back)

    __matmul__ = matmul

    # ------------------------------------------------------------------ #
    # elementwise functions

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return make_op(out, (self,), lambda g: (g * out,))

    def ln(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise ValueError("ln domain error: non-positive input")
        return make_op(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return make_op(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return make_op(np.abs(self.data), (self,), lambda g: (g * sign,))

    def sigmoid(self) -> "Tensor":
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return make_op(out, (self,), lambda g: (g * out * (1.0 - out),))

    def gelu(self) -> "Tensor":
        """Exact (erf) GELU; smooth everywhere, so gradient checks stay clean."""
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = x * cdf

        def back(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            return (g * (cdf + x * pdf),)

        return make_op(out, (self,), back)

    def silu(self) -> "Tensor":
        x = self.data
        sig = 1.0 / (1.0 + np.exp(-x))
        out = x * sig
        return make_op(out, (self,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))

    def mask_fill(self, mask, value: float) -> "Tensor":
        """Replace entries where `mask` is true with `value` (constant w.r.t. grad)."""
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), self.data.shape)
        out = np.where(mask, value, self.data)
        keep = ~mask
        return make_op(out, (self,), lambda g: (g * keep,))

    # ------------------------------------------------------------------ #
    # softmax and reductions

    def softmax(self, axis: int = -1) -> "Tensor":
        """Numerically stable softmax along `axis` (max-subtraction)."""
        _check_axis(self.data, axis)
        shifted = self.data - np.max(self.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return make_op(out, (self,), back)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        _check_reduce(self.data, axis)
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            return (np.broadcast_to(_restore_dims(g, self.data.shape, axis, keepdims), self.data.shape),)

        return make_op(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        _check_reduce(self.data, axis)
        out = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else np.prod([self.data.shape[a] for a in _axis_tuple(axis, self.data.ndim)])

        def back(g):
            spread = _restore_dims(g, self.data.shape, axis, keepdims) / count
            return (np.broadcast_to(spread, self.data.shape),)

        return make_op(out, (self,), back)

    def max_with_indices(self, axis: int) -> tuple["Tensor", np.ndarray]:
        """Max along `axis` plus argmax indices; ties break to the lowest index."""
        _check_reduce(self.data, axis)
        idx = np.argmax(self.data, axis=axis)
        out = np.max(self.data, axis=axis)

        def back(g):
            z = np.zeros_like(self.data)
            np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
            return (z,)

        return make_op(out, (self,), back), idx

    # ------------------------------------------------------------------ #
    # shape ops

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return make_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),))

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return make_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return make_op(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    def pad_axis(self, axis: int, after: int) -> "Tensor":
        """Zero-pad `after` entries at the end of `axis`."""
        if after == 0:
            return self
        width = [(0, 0)] * self.data.ndim
        width[axis] = (0, after)
        n = self.data.shape[axis]
        sl = [slice(None)] * self.data.ndim
        sl[axis] = slice(0, n)
        sl = tuple(sl)
        return make_op(np.pad(self.data, width), (self,), lambda g: (g[sl],))

    def __getitem__(self, key) -> "Tensor":
        out = np.array(self.data[key])
        advanced = _has_array_index(key)

        def back(g):
            z = np.zeros_like(self.data)
            if advanced:
                np.add.at(z, key, g)
            else:
                z[key] += g
            return (z,)

        return make_op(out, (self,), back)

    def scatter_rows(self, rows: np.ndarray, total: int) -> "Tensor":
        """Place 2-D `self` at row indices `rows` (unique) of a (total, F) zero tensor."""
        rows = np.asarray(rows)
        out = np.zeros((total,) + self.data.shape[1:], dtype=np.float64)
        out[rows] = self.data
        return make_op(out, (self,), lambda g: (g[rows],))


# ---------------------------------------------------------------------- #
# helpers


def make_op(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Build an op result; records the graph only when gradients are live."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_axis(data: np.ndarray, axis: int):
    if not -data.ndim <= axis < data.ndim:
        raise ValueError(f"axis {axis} out of bounds for shape {data.shape}")


def _axis_tuple(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _check_reduce(data: np.ndarray, axis):
    for a in _axis_tuple(axis, data.ndim):
        _check_axis(data, a)
        if data.shape[a] == 0:
            raise ValueError(f"cannot reduce over empty axis {a} of shape {data.shape}")
    if axis is None and data.size == 0:
        raise ValueError("cannot reduce an empty tensor")


def _restore_dims(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Reshape a reduced gradient so it broadcasts back over `shape`."""
    if keepdims:
        return g
    if axis is None:
        return np.reshape(g, (1,) * len(shape))
    expanded = list(g.shape)
    for a in sorted(_axis_tuple(axis, len(shape))):
        expanded.insert(a, 1)
    return g.reshape(expanded)


def _has_array_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in items)


def tensor(data) -> Tensor:
    return Tensor(data)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64))
