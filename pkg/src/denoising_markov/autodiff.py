"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations needed by the score networks and the losses are
provided. Broadcasting follows numpy; gradients of broadcast operands are
summed back to the operand's shape.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array node in a computation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # graph construction -------------------------------------------------

    @staticmethod
    def _wrap(other):
        return other if isinstance(other, Tensor) else Tensor(other)

    def _make(self, data, parents, backward):
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, True, parents, backward)

    def __add__(self, other):
        other = self._wrap(other)
        out = None

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        out = self._make(self.data + other.data, (self, other), backward)
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / other.data**2, other.shape)
                )

        return self._make(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, exponent):
        exponent = float(exponent)

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return self._make(self.data**exponent, (self,), backward)

    def __matmul__(self, other):
        other = self._wrap(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ np.swapaxes(other.data, -1, -2))
            if other.requires_grad:
                other._accumulate(np.swapaxes(self.data, -1, -2) @ g)

        return self._make(self.data @ other.data, (self, other), backward)

    def __rmatmul__(self, other):
        return self._wrap(other) @ self

    def __getitem__(self, index):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)

        return self._make(self.data[index], (self,), backward)

    def reshape(self, *shape):
        def backward(g):
            self._accumulate(g.reshape(self.shape))

        return self._make(self.data.reshape(*shape), (self,), backward)

    @property
    def T(self):
        def backward(g):
            self._accumulate(g.T)

        return self._make(self.data.T, (self,), backward)

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def exp(self):
        value = np.exp(self.data)

        def backward(g):
            self._accumulate(g * value)

        return self._make(value, (self,), backward)

    def log(self):
        def backward(g):
            self._accumulate(g / self.data)

        return self._make(np.log(self.data), (self,), backward)

    def silu(self):
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        value = self.data * sig

        def backward(g):
            self._accumulate(g * (sig + self.data * sig * (1.0 - sig)))

        return self._make(value, (self,), backward)

    def tanh(self):
        value = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - value**2))

        return self._make(value, (self,), backward)

    # backward pass -------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def concat(tensors, axis=-1):
    """Concatenate tensors along ``axis``."""
    tensors = [Tensor._wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    if not any(t.requires_grad for t in tensors):
        return Tensor(data)
    return Tensor(data, True, tuple(tensors), backward)


def value_and_grad(loss_fn, params):
    """Evaluate ``loss_fn(Tensor(params))`` and its gradient w.r.t. ``params``.

    ``loss_fn`` must return a scalar :class:`Tensor`. Raises ``FloatingPointError``
    when the loss is not finite.
    """
    leaf = Tensor(np.array(params, dtype=np.float64, copy=True), requires_grad=True)
    loss = loss_fn(leaf)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value!r}")
    loss.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return value, grad


def grad(loss_fn, params):
    """Reverse-mode gradient of a scalar-loss closure at ``params``."""
    return value_and_grad(loss_fn, params)[1]
