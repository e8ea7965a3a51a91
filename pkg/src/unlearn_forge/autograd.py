"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Each differentiable op appends its output node to the active :class:`Tape`
in execution order; :meth:`Tape.backward` walks the tape in reverse and
accumulates gradients into the leaves.  Only the ops the transformer and
the unlearning losses need are provided, several of them fused
(log-softmax, causal softmax, layer norm, GELU) for stability and speed.
"""
from __future__ import annotations

import math

import numpy as np


class TapeStateError(RuntimeError):
    """Backward requested on a tape that recorded nothing."""


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Var] = []

    def leaf(self, data: np.ndarray, name: str | None = None) -> "Var":
        v = Var(data, self, requires_grad=self.record)
        v.name = name
        return v

    def const(self, data, dtype=None) -> "Var":
        arr = np.asarray(data, dtype=dtype)
        return Var(arr, self, requires_grad=False)

    def _push(self, out: "Var", parents, back) -> "Var":
        if self.record and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._back = back
            self.nodes.append(out)
        return out

    def backward(self, loss: "Var") -> None:
        if not self.nodes:
            raise TapeStateError("backward() called before any differentiable forward pass")
        if loss.data.size != 1:
            raise TapeStateError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise TapeStateError("loss does not depend on any watched parameter")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            grads = node._back(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node is not loss:
                node.grad = None  # free intermediate memory


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    __slots__ = ("data", "tape", "requires_grad", "grad", "name", "_parents", "_back")

    __array_priority__ = 100

    def __init__(self, data, tape: Tape, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self.name = None
        self._parents = ()
        self._back = None

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return Var(np.asarray(other, dtype=self.data.dtype), self.tape)

    def _new(self, data, parents, back) -> "Var":
        return self.tape._push(Var(data, self.tape), parents, back)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        o = self._lift(other)
        sa, sb = self.data.shape, o.data.shape
        return self._new(self.data + o.data, (self, o),
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        sa, sb = self.data.shape, o.data.shape
        return self._new(self.data - o.data, (self, o),
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return self._new(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        o = self._lift(other)
        a, b = self.data, o.data
        return self._new(a * b, (self, o),
                         lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        a, b = self.data, o.data
        out = a / b

        def back(g):
            ga = _unbroadcast(g / b, a.shape)
            gb = _unbroadcast(-g * out / b, b.shape) if o.requires_grad else None
            return ga, gb

        return self._new(out, (self, o), back)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __matmul__(self, other):
        o = self._lift(other)
        a, b = self.data, o.data

        def back(g):
            if b.ndim == 2 and a.ndim > 2:
                ga = g @ b.T
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                return ga, gb
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return self._new(a @ b, (self, o), back)

    def __getitem__(self, idx):
        shape = self.data.shape
        dtype = self.data.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return self._new(self.data[idx], (self,), back)

    # shape ----------------------------------------------------------------
    def reshape(self, *shape):
        old = self.data.shape
        return self._new(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return self._new(self.data.transpose(*axes), (self,), lambda g: (g.transpose(*inv),))

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._new(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # elementwise ----------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return self._new(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return self._new(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return self._new(out, (self,), lambda g: (g * (1.0 - out * out),))

    def softplus(self):
        x = self.data
        out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
        return self._new(out, (self,), lambda g: (g * _sigmoid(x),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return self._new(out, (self,), lambda g: (g * out * (1.0 - out),))

    def log_sigmoid(self):
        return -((-self).softplus())

    def square(self):
        x = self.data
        return self._new(x * x, (self,), lambda g: (2.0 * g * x,))

    def gelu(self):
        # tanh approximation, as in GPT-2
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return self._new(out, (self,), back)

    # fused reductions -------------------------------------------------------
    def log_softmax(self):
        x = self.data
        m = x.max(axis=-1, keepdims=True)
        z = x - m
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse

        def back(g):
            p = np.exp(out)
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self._new(out, (self,), back)

    def causal_softmax(self):
        """Softmax over the last axis with keys after the query masked out."""
        x = self.data
        t_q, t_k = x.shape[-2], x.shape[-1]
        mask = np.triu(np.ones((t_q, t_k), dtype=bool), k=1 + t_k - t_q)
        z = np.where(mask, -np.inf, x)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return self._new(out, (self,), back)

    def take_last(self, index: np.ndarray):
        """``x[..., index]`` elementwise along the last axis (take_along_axis)."""
        x = self.data
        idx = np.asarray(index)[..., None]
        out = np.take_along_axis(x, idx, axis=-1)[..., 0]

        def back(g):
            full = np.zeros_like(x)
            np.put_along_axis(full, idx, g[..., None], axis=-1)
            return (full,)

        return self._new(out, (self,), back)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x)).astype(np.asarray(x).dtype, copy=False)


def embedding(table: Var, ids: np.ndarray) -> Var:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    shape = table.data.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return table._new(table.data[ids], (table,), back)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def back(g):
        gg = _unbroadcast(g * xhat, gain.data.shape)
        gb = _unbroadcast(g, bias.data.shape)
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return x._new(out, (x, gain, bias), back)
