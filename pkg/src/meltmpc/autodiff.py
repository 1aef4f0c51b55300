"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operations that
produced it.  Calling :meth:`Tensor.backward` on a scalar result walks the
recorded graph in reverse topological order and accumulates gradients into
every upstream tensor created with ``requires_grad=True`` -- model weights
during training, or the future control inputs inside the MPC solve.

The op set is deliberately small: dense layers, elementwise nonlinearities,
reductions, reshapes/slices and concatenation cover the whole forecaster and
the controller's penalty terms.  Everything computes in float64.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing the axes numpy broadcast."""
    if grad.shape == shape:
        return grad
    # sum away prepended axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum axes that were size-1 in the original
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, seed=None) -> None:
        """Reverse sweep from this tensor.

        With no seed the tensor must be scalar (the usual loss case).
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError("seed shape must match tensor shape")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        track = self.requires_grad or other.requires_grad
        out = Tensor(self.data + other.data, track, (self, other) if track else ())
        if track:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        track = self.requires_grad
        out = Tensor(-self.data, track, (self,) if track else ())
        if track:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        track = self.requires_grad or other.requires_grad
        out = Tensor(self.data * other.data, track, (self, other) if track else ())
        if track:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        track = self.requires_grad or other.requires_grad
        out = Tensor(self.data / other.data, track, (self, other) if track else ())
        if track:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-g * self.data / other.data ** 2, other.data.shape)
                    )
            out._backward = bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        track = self.requires_grad
        out = Tensor(self.data ** exponent, track, (self,) if track else ())
        if track:
            def bw(g):
                self._accumulate(g * exponent * self.data ** (exponent - 1.0))
            out._backward = bw
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        track = self.requires_grad or other.requires_grad
        out = Tensor(self.data @ other.data, track, (self, other) if track else ())
        if track:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(g @ other.data.T)
                if other.requires_grad:
                    other._accumulate(self.data.T @ g)
            out._backward = bw
        return out

    # ------------------------------------------------------------------
    # nonlinearities
    def relu(self):
        track = self.requires_grad
        out = Tensor(np.maximum(self.data, 0.0), track, (self,) if track else ())
        if track:
            mask = self.data > 0.0
            out._backward = lambda g: self._accumulate(g * mask)
        return out

    def sigmoid(self):
        track = self.requires_grad
        # numerically stable logistic
        s = np.where(
            self.data >= 0,
            1.0 / (1.0 + np.exp(-np.clip(self.data, -700, 700))),
            np.exp(np.clip(self.data, -700, 700))
            / (1.0 + np.exp(np.clip(self.data, -700, 700))),
        )
        out = Tensor(s, track, (self,) if track else ())
        if track:
            out._backward = lambda g: self._accumulate(g * s * (1.0 - s))
        return out

    # ------------------------------------------------------------------
    # reductions and shape ops
    def sum(self, axis=None, keepdims: bool = False):
        track = self.requires_grad
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), track,
                     (self,) if track else ())
        if track:
            shape = self.data.shape

            def bw(g):
                if axis is None:
                    self._accumulate(np.broadcast_to(g, shape).copy())
                    return
                gg = g
                if not keepdims:
                    gg = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, shape).copy())
            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        track = self.requires_grad
        out = Tensor(self.data.reshape(shape), track, (self,) if track else ())
        if track:
            orig = self.data.shape
            out._backward = lambda g: self._accumulate(g.reshape(orig))
        return out

    def __getitem__(self, key):
        track = self.requires_grad
        out = Tensor(self.data[key], track, (self,) if track else ())
        if track:
            shape = self.data.shape

            def bw(g):
                full = np.zeros(shape)
                full[key] = g
                self._accumulate(full)
            out._backward = bw
        return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; gradient follows the winning branch (ties -> a)."""
    a, b = as_tensor(a), as_tensor(b)
    track = a.requires_grad or b.requires_grad
    out = Tensor(np.maximum(a.data, b.data), track, (a, b) if track else ())
    if track:
        take_a = a.data >= b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * take_a, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * ~take_a, b.data.shape))
        out._backward = bw
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    track = any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), track,
                 tuple(tensors) if track else ())
    if track:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            pieces = np.split(g, splits, axis=axis)
            for t, piece in zip(tensors, pieces):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize along the last axis, then apply a learned affine map."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gamma + beta
