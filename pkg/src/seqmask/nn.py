"""Neural building blocks composed from autodiff primitives."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, concat


def xavier_uniform(
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    shape: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class Module:
    """Base class whose attributes define the (ordered) parameter tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(xavier_uniform(d_in, d_out, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Two-layer perceptron with a ReLU hidden layer."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.hidden = Linear(d_in, d_hidden, rng)
        self.out = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(self.hidden(x).relu())


class MultiHeadAttention(Module):
    """Scaled dot-product attention with parallel heads over (..., tokens, d)."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d // heads
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_o = Linear(d, d, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        q, k, v = self.w_q(query), self.w_k(key), self.w_v(value)
        scale = 1.0 / math.sqrt(self.d_head)
        outs = []
        for h in range(self.heads):
            cols = slice(h * self.d_head, (h + 1) * self.d_head)
            qh, kh, vh = q[..., cols], k[..., cols], v[..., cols]
            weights = ((qh @ kh.T) * scale).softmax(axis=-1)
            outs.append(weights @ vh)
        return self.w_o(concat(outs, axis=-1))


class GRU(Module):
    """Single-layer gated recurrent unit returning the final hidden state.

    Gate layout in the stacked weights is (reset, update, candidate);
    the update follows h' = (1 - z) * n + z * h.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_hidden = d_hidden
        self.w_x = Tensor(xavier_uniform(d_in, 3 * d_hidden, rng), requires_grad=True)
        self.w_h = Tensor(xavier_uniform(d_hidden, 3 * d_hidden, rng), requires_grad=True)
        self.b_x = Tensor(np.zeros(3 * d_hidden), requires_grad=True)
        self.b_h = Tensor(np.zeros(3 * d_hidden), requires_grad=True)

    def __call__(self, xs: Tensor) -> Tensor:
        """xs: (..., T, d_in) -> (..., d_hidden), starting from a zero state."""
        if xs.ndim < 2:
            raise ValueError(f"GRU needs (..., T, d_in) input, got {xs.shape}")
        hid = self.d_hidden
        steps = xs.shape[-2]
        gates_x = xs @ self.w_x + self.b_x
        h = Tensor(np.zeros(xs.shape[:-2] + (hid,)))
        for step in range(steps):
            gx = gates_x[..., step, :]
            gh = h @ self.w_h + self.b_h
            r = (gx[..., :hid] + gh[..., :hid]).sigmoid()
            z = (gx[..., hid : 2 * hid] + gh[..., hid : 2 * hid]).sigmoid()
            n = (gx[..., 2 * hid :] + r * gh[..., 2 * hid :]).tanh()
            h = (1.0 - z) * n + z * h
        return h


class TransformerEncoder(Module):
    """One residual encoder layer: input projection, self-attention, feed-forward.

    The last linear map of every residual branch starts scaled down so the
    layer is near-identity at initialization; per-feature masks downstream
    stay meaningful because hidden coordinate j begins dominated by input
    coordinate j instead of a random mixture.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, branch_scale: float = 0.05):
        self.proj = Linear(d, d, rng)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ffn = MLP(d, d, d, rng)
        for out in (self.proj, self.attn.w_o, self.ffn.out):
            out.weight.data *= branch_scale

    def __call__(self, x: Tensor) -> Tensor:
        h = x + self.proj(x)
        h = h + self.attn(h, h, h)
        return h + self.ffn(h)
