"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every tensor operation in execution order. Calling
:meth:`Tape.backward` walks the record in reverse and accumulates adjoints
into each :class:`Tensor`'s ``grad``.

Tensors implement ``__array_ufunc__`` so plain numpy code (``np.exp``,
``np.maximum``, arithmetic operators, ``@``) runs unchanged on them. The
strategy and generator formulas are written once and shared between the
differentiable training path and the numpy-only evaluation path.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Linear record of operations for one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def var(self, value, name: str | None = None) -> "Tensor":
        """Create a leaf tensor whose gradient is wanted."""
        return Tensor(np.asarray(value, dtype=float), self, (), None, name=name)

    def _record(self, value, parents, backward) -> "Tensor":
        t = Tensor(value, self, parents, backward)
        self._nodes.append(t)
        return t


    def backward(self, output: "Tensor") -> None:
        if output.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        output.grad = np.ones_like(output.value)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


class Tensor:
    """Array value plus its position on a tape."""

    __slots__ = ("value", "grad", "tape", "_parents", "_backward", "name", "_owned")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape, parents, backward, name=None):
        self.value = value
        self.grad: np.ndarray | None = None
        self._owned = False
        self.tape = tape
        self._parents = parents
        self._backward = backward
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def _accumulate(self, g) -> None:
        if np.shape(g) != self.value.shape:
            g = _unbroadcast(np.asarray(g), self.value.shape)
        if self.grad is None:
            # Upstream arrays may be shared between parents; never mutate them.
            self.grad = g
            self._owned = False
        else:
            self.grad = self.grad + g
            self._owned = True

    # -- numpy interop -------------------------------------------------

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        op = _UFUNCS.get(ufunc)
        if op is None:
            return NotImplemented
        tape = next(x.tape for x in inputs if isinstance(x, Tensor))
        return op(tape, *inputs)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _UFUNCS[np.negative](self.tape, self)

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        p = float(p)
        x = self.value
        if p == 2.0:
            return self.tape._record(x * x, (self,), lambda g: self._accumulate(2.0 * x * g))
        out = x**p
        return self.tape._record(out, (self,), lambda g: self._accumulate(p * x ** (p - 1.0) * g))

    def __matmul__(self, other):
        return np.matmul(self, other)

    def __rmatmul__(self, other):
        return np.matmul(other, self)

    def __getitem__(self, idx):
        out = self.value[idx]

        def back(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.value)
            elif not self._owned:
                self.grad = self.grad.copy()
            self._owned = True
            self.grad[idx] += g

        return self.tape._record(out, (self,), back)

    def sum(self, axis=None, keepdims=False):
        x = self.value
        out = x.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, x.shape))

        return self.tape._record(np.asarray(out), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.value.shape
        out = self.value.reshape(*shape)
        return self.tape._record(out, (self,), lambda g: self._accumulate(g.reshape(old)))


def _val(x):
    if isinstance(x, Tensor):
        return x.value
    return x if isinstance(x, (float, np.ndarray)) else np.asarray(x, dtype=float)


def _binary(fn: Callable, da: Callable, db: Callable):
    def op(tape, a, b):
        av, bv = _val(a), _val(b)
        out = fn(av, bv)

        def back(g):
            if isinstance(a, Tensor):
                a._accumulate(da(g, av, bv, out))
            if isinstance(b, Tensor):
                b._accumulate(db(g, av, bv, out))

        return tape._record(out, (a, b), back)

    return op


# Hand-specialised arithmetic: these run hundreds of times per rollout step
# and skip the generic ufunc dispatch.

def _add(a, b):
    at, bt = type(a) is Tensor, type(b) is Tensor
    tape = a.tape if at else b.tape
    out = (a.value if at else a) + (b.value if bt else b)

    def back(g):
        if at:
            a._accumulate(g)
        if bt:
            b._accumulate(g)

    return tape._record(out, None, back)


def _sub(a, b):
    at, bt = type(a) is Tensor, type(b) is Tensor
    tape = a.tape if at else b.tape
    out = (a.value if at else a) - (b.value if bt else b)

    def back(g):
        if at:
            a._accumulate(g)
        if bt:
            b._accumulate(-g)

    return tape._record(out, None, back)


def _mul(a, b):
    at, bt = type(a) is Tensor, type(b) is Tensor
    tape = a.tape if at else b.tape
    av = a.value if at else a
    bv = b.value if bt else b
    out = av * bv

    def back(g):
        if at:
            a._accumulate(g * bv)
        if bt:
            b._accumulate(g * av)

    return tape._record(out, None, back)


def _div(a, b):
    at, bt = type(a) is Tensor, type(b) is Tensor
    tape = a.tape if at else b.tape
    av = a.value if at else a
    bv = b.value if bt else b
    out = av / bv

    def back(g):
        q = g / bv
        if at:
            a._accumulate(q)
        if bt:
            b._accumulate(-q * out)

    return tape._record(out, None, back)


def _unary(fn: Callable, d: Callable):
    def op(tape, a):
        av = a.value
        out = fn(av)
        return tape._record(out, (a,), lambda g: a._accumulate(d(g, av, out)))

    return op


def _matmul(tape, a, b):
    av, bv = _val(a), _val(b)
    out = np.matmul(av, bv)

    def back(g):
        if isinstance(a, Tensor):
            a._accumulate(np.matmul(g, np.swapaxes(bv, -1, -2)))
        if isinstance(b, Tensor):
            b._accumulate(np.matmul(np.swapaxes(av, -1, -2), g))

    return tape._record(out, (a, b), back)


def _extremum(fn: Callable, pick_a: Callable):
    # Ties send the gradient to the first argument.
    def op(tape, a, b):
        av, bv = _val(a), _val(b)
        out = fn(av, bv)
        mask = pick_a(av, bv)

        def back(g):
            if isinstance(a, Tensor):
                a._accumulate(np.where(mask, g, 0.0))
            if isinstance(b, Tensor):
                b._accumulate(np.where(mask, 0.0, g))

        return tape._record(out, (a, b), back)

    return op


_UFUNCS = {
    np.add: _binary(np.add, lambda g, a, b, o: g, lambda g, a, b, o: g),
    np.subtract: _binary(np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g),
    np.multiply: _binary(np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a),
    np.true_divide: _binary(
        np.true_divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b
    ),
    np.negative: _unary(np.negative, lambda g, a, o: -g),
    np.exp: _unary(np.exp, lambda g, a, o: g * o),
    np.log: _unary(np.log, lambda g, a, o: g / a),
    np.sqrt: _unary(np.sqrt, lambda g, a, o: g * 0.5 / o),
    np.square: _unary(np.square, lambda g, a, o: 2.0 * a * g),
    np.maximum: _extremum(np.maximum, lambda a, b: a >= b),
    np.minimum: _extremum(np.minimum, lambda a, b: a <= b),
    np.matmul: _matmul,
}


def relu(x):
    """Rectifier that works on arrays and tensors (gradient 0 at the kink)."""
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    xv = x.value
    out = np.where(xv > 0.0, xv, 0.0)
    return x.tape._record(out, (x,), lambda g: x._accumulate(np.where(xv > 0.0, g, 0.0)))


def batch_norm(h, gain, shift, eps: float, axis: int = 1):
    """Normalise ``h`` over ``axis`` with batch statistics, then scale and shift.

    Returns ``(out, mean, var)``; ``mean`` and ``var`` are plain arrays.
    Recorded as a single tape node.
    """
    hv = value(h)
    mu = hv.mean(axis=axis, keepdims=True)
    c = hv - mu
    var = (c * c).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = c * inv
    gv, bv = value(gain), value(shift)
    out = xhat * gv + bv
    tensors = [t for t in (h, gain, shift) if isinstance(t, Tensor)]
    if not tensors:
        return out, mu, var

    def back(g):
        if isinstance(shift, Tensor):
            shift._accumulate(g.sum(axis=axis, keepdims=True))
        if isinstance(gain, Tensor):
            gain._accumulate((g * xhat).sum(axis=axis, keepdims=True))
        if isinstance(h, Tensor):
            dx = g * gv
            h._accumulate(inv * (dx - dx.mean(axis=axis, keepdims=True)
                                 - xhat * (dx * xhat).mean(axis=axis, keepdims=True)))

    return tensors[0].tape._record(out, tuple(tensors), back), mu, var


def bn_relu(h, gain, shift, eps: float):
    """``relu(batch_norm(h))`` over the last axis of an ``(S, H, B)`` array, as one node."""
    from ._kernels import bn_relu_backward, bn_relu_forward

    hv = np.ascontiguousarray(value(h), dtype=float)
    gv = np.ascontiguousarray(value(gain), dtype=float)
    sv = np.ascontiguousarray(value(shift), dtype=float)
    out, xhat, mu, var, inv = bn_relu_forward(hv, gv, sv, float(eps))
    tensors = [t for t in (h, gain, shift) if isinstance(t, Tensor)]
    if not tensors:
        return out, mu, var

    def back(g):
        dh, dg, db = bn_relu_backward(np.ascontiguousarray(g), out, xhat, inv, gv)
        if isinstance(h, Tensor):
            h._accumulate(dh)
        if isinstance(gain, Tensor):
            gain._accumulate(dg)
        if isinstance(shift, Tensor):
            shift._accumulate(db)

    return tensors[0].tape._record(out, tuple(tensors), back), mu, var


def value(x) -> np.ndarray:
    """Strip a tensor down to its numpy value (identity for arrays)."""
    return x.value if isinstance(x, Tensor) else np.asarray(x)
