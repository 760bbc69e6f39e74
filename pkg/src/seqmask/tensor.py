"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation appends a node to a dynamic graph; ``Tensor.backward()``
walks the graph in reverse topological order and accumulates gradients into
the tensors created with ``requires_grad=True``. Gradients from separate
backward calls accumulate, so optimizers zero parameter grads between steps.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Sequence

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward compute)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # backward pass

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # ------------------------------------------------------------------
    # elementwise arithmetic

    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data

        def bw():
            _accum(self, _unbroadcast(out.grad, self.data.shape))
            _accum(other, _unbroadcast(out.grad, other.data.shape))

        out = _node(out_data, (self, other), bw)
        return out

    __radd__ = __add__

    def __neg__(self):
        def bw():
            _accum(self, -out.grad)

        out = _node(-self.data, (self,), bw)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out_data = self.data * other.data

        def bw():
            _accum(self, _unbroadcast(out.grad * other.data, self.data.shape))
            _accum(other, _unbroadcast(out.grad * self.data, other.data.shape))

        out = _node(out_data, (self, other), bw)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out_data = self.data / other.data

        def bw():
            _accum(self, _unbroadcast(out.grad / other.data, self.data.shape))
            _accum(
                other,
                _unbroadcast(
                    -out.grad * self.data / other.data**2, other.data.shape
                ),
            )

        out = _node(out_data, (self, other), bw)
        return out

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")

        def bw():
            _accum(self, out.grad * p * self.data ** (p - 1))

        out = _node(self.data**p, (self,), bw)
        return out

    # ------------------------------------------------------------------
    # matrix products

    def matmul(self, other) -> "Tensor":
        other = _wrap(other)
        A, B = self.data, other.data
        if A.ndim == 0 or B.ndim == 0:
            raise ValueError("matmul needs at least 1-D operands")
        a1, b1 = A.ndim == 1, B.ndim == 1
        A2 = A[None, :] if a1 else A
        B2 = B[:, None] if b1 else B
        if A2.shape[-1] != B2.shape[-2]:
            raise ValueError(
                f"matmul inner dimensions differ: {self.shape} @ {other.shape}"
            )
        out2 = A2 @ B2
        if a1 and b1:
            out_data = out2[..., 0, 0]
        elif a1:
            out_data = out2[..., 0, :]
        elif b1:
            out_data = out2[..., 0]
        else:
            out_data = out2

        def bw():
            g = out.grad
            if a1 and b1:
                g2 = g[..., None, None]
            elif a1:
                g2 = g[..., None, :]
            elif b1:
                g2 = g[..., None]
            else:
                g2 = g
            gA = _unbroadcast(g2 @ np.swapaxes(B2, -1, -2), A2.shape)
            gB = _unbroadcast(np.swapaxes(A2, -1, -2) @ g2, B2.shape)
            if a1:
                gA = gA[0]
            if b1:
                gB = gB[:, 0]
            _accum(self, gA)
            _accum(other, gB)

        out = _node(out_data, (self, other), bw)
        return out

    __matmul__ = matmul

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw():
            g = out.grad
            if axis is None:
                if not keepdims:
                    gx = np.full_like(self.data, g)
                else:
                    gx = np.broadcast_to(g, self.data.shape)
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                gx = np.broadcast_to(g, self.data.shape)
            _accum(self, gx)

        out = _node(out_data, (self,), bw)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------------
    # elementwise nonlinearities

    def exp(self) -> "Tensor":
        e = np.exp(self.data)

        def bw():
            _accum(self, out.grad * e)

        out = _node(e, (self,), bw)
        return out

    def log(self) -> "Tensor":
        def bw():
            _accum(self, out.grad / self.data)

        out = _node(np.log(self.data), (self,), bw)
        return out

    def sqrt(self) -> "Tensor":
        root = np.sqrt(self.data)

        def bw():
            _accum(self, out.grad * 0.5 / root)

        out = _node(root, (self,), bw)
        return out

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)

        def bw():
            _accum(self, out.grad * (1.0 - t**2))

        out = _node(t, (self,), bw)
        return out

    def sigmoid(self) -> "Tensor":
        s = _stable_sigmoid(self.data)

        def bw():
            _accum(self, out.grad * s * (1.0 - s))

        out = _node(s, (self,), bw)
        return out

    def relu(self) -> "Tensor":
        keep = self.data > 0

        def bw():
            _accum(self, out.grad * keep)

        out = _node(self.data * keep, (self,), bw)
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)

        def bw():
            g = out.grad
            inner = (g * s).sum(axis=axis, keepdims=True)
            _accum(self, s * (g - inner))

        out = _node(s, (self,), bw)
        return out

    # ------------------------------------------------------------------
    # shape manipulation

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bw():
            _accum(self, out.grad.reshape(self.data.shape))

        out = _node(self.data.reshape(shape), (self,), bw)
        return out

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        def bw():
            _accum(self, np.swapaxes(out.grad, axis1, axis2))

        out = _node(np.swapaxes(self.data, axis1, axis2), (self,), bw)
        return out

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx) -> "Tensor":
        # basic indexing only (ints/slices); backward scatters into a zero array
        def bw():
            g = np.zeros_like(self.data)
            g[idx] = out.grad
            _accum(self, g)

        out = _node(self.data[idx], (self,), bw)
        return out


# ----------------------------------------------------------------------
# free functions building graph nodes


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis``; gradients split back apart."""
    parts = [_wrap(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw():
        offsets = np.cumsum(sizes[:-1])
        for part, g in zip(parts, np.split(out.grad, offsets, axis=axis)):
            _accum(part, g)

    out = _node(out_data, tuple(parts), bw)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between rows of ``logits`` and integer ``labels``.

    Computed through a stable log-sum-exp; the backward pass is
    (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    n, k = logits.shape
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != n:
        raise ValueError(f"{lab.shape[0]} labels for {n} logit rows")
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    loss = (lse - x[np.arange(n), lab]).mean()

    def bw():
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), lab] -= 1.0
        _accum(logits, out.grad * p / n)

    out = _node(np.asarray(loss), (logits,), bw)
    return out


def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm over all elements; subgradient 0 at the origin."""
    n = float(np.sqrt((x.data**2).sum()))

    def bw():
        if n > 0.0:
            _accum(x, out.grad * (x.data / n))
        else:
            _accum(x, np.zeros_like(x.data))

    out = _node(np.asarray(n), (x,), bw)
    return out


def l2norm_rows(x: Tensor) -> Tensor:
    """Euclidean norms over the last axis; subgradient 0 where the norm is 0."""
    n = np.sqrt((x.data**2).sum(axis=-1))

    def bw():
        safe = np.where(n > 0.0, n, 1.0)
        g = (out.grad / safe)[..., None] * x.data
        g[n == 0.0] = 0.0
        _accum(x, g)

    out = _node(n, (x,), bw)
    return out


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward takes ``hard``; backward passes gradients to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if soft.shape != hard.shape:
        raise ValueError(f"shape mismatch: soft {soft.shape} vs hard {hard.shape}")

    def bw():
        _accum(soft, out.grad)

    out = _node(hard, (soft,), bw)
    return out
