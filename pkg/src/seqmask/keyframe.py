"""Keyframe selection for frame sequences.

Each frame is scored from a local difference (its replicate-padded
2k-neighborhood average minus itself) and a global difference (self-attention
over the sequence). A two-way softmax yields per-frame probabilities with
column 0 = drop and column 1 = keep; training samples hard decisions with a
straight-through Gumbel estimator, evaluation takes the argmax. Dropped
frames are zeroed, not removed, and a GRU reconstruction loss ties the kept
subsequence to the full one.
"""

from __future__ import annotations

import numpy as np

from .nn import GRU, MLP, Module, MultiHeadAttention
from .tensor import Tensor, concat, l2norm, l2norm_rows, straight_through


def local_difference(frames: Tensor, k: int) -> Tensor:
    """M_i = (1/2k)(sum_{j=i-k..i} x_j + sum_{j=i+1..i+k} x_j) - x_i.

    The left window includes frame i itself; out-of-range neighbors replicate
    the edge frames. A constant sequence c therefore maps to c/(2k).
    """
    if k < 1:
        raise ValueError(f"neighborhood stride must be >= 1, got {k}")
    if frames.ndim < 2 or frames.shape[-2] < 1:
        raise ValueError(f"frames must be (..., T >= 1, d), got {frames.shape}")
    steps = frames.shape[-2]
    first = frames[..., :1, :]
    last = frames[..., steps - 1 : steps, :]
    padded = concat([first] * k + [frames] + [last] * k, axis=-2)
    total = None
    for offset in range(2 * k + 1):
        window = padded[..., offset : offset + steps, :]
        total = window if total is None else total + window
    return total * (1.0 / (2 * k)) - frames


def global_difference(frames: Tensor, attention: MultiHeadAttention) -> Tensor:
    """Self-attention of the frame sequence against its own context."""
    return attention(frames, frames, frames)


def frame_keep_probabilities(m_local: Tensor, m_global: Tensor, mlp: MLP) -> Tensor:
    """Per-frame (drop, keep) probabilities from the two difference signals."""
    return mlp(concat([m_local, m_global], axis=-1)).softmax(axis=-1)


def sample_decision(
    pi: Tensor,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> Tensor:
    """Binary keep decisions D from probabilities pi of shape (..., T, 2).

    Train mode draws hard straight-through Gumbel samples (forward in {0,1},
    backward through the tempered soft sample); eval mode takes the argmax
    and returns a constant. Any sample that would drop every frame has its
    highest-keep-probability frame force-kept (ties -> lowest index).
    """
    if pi.shape[-1] != 2:
        raise ValueError(f"expected (..., T, 2) probabilities, got {pi.shape}")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        u = rng.random(pi.shape)
        gumbel = -np.log(-np.log(u + 1e-20) + 1e-20)
        soft = (((pi + 1e-30).log() + Tensor(gumbel)) * (1.0 / temperature)).softmax(axis=-1)
        keep = (soft.data[..., 1] > soft.data[..., 0]).astype(np.float64)
    elif mode == "eval":
        keep = (pi.data[..., 1] > pi.data[..., 0]).astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    keep_prob = pi.data[..., 1]
    flat_keep = keep.reshape(-1, keep.shape[-1])
    flat_prob = keep_prob.reshape(-1, keep_prob.shape[-1])
    for row, probs in zip(flat_keep, flat_prob):
        if row.sum() == 0.0:
            row[np.argmax(probs)] = 1.0

    if mode == "eval":
        return Tensor(keep)
    return straight_through(soft[..., 1], keep)


def apply_decision(frames: Tensor, decision: Tensor) -> Tensor:
    """Zero out dropped frames: frame row i is scaled by D_i."""
    return frames * decision.reshape(decision.shape + (1,))


def recon_loss(kept: Tensor, original: Tensor, gru: GRU) -> Tensor:
    """Euclidean distance between GRU encodings of the kept-only and full
    sequences; batched inputs average per-sample distances."""
    diff = gru(kept) - gru(original)
    if diff.ndim == 1:
        return l2norm(diff)
    return l2norm_rows(diff).mean()


class KeyframeHead(Module):
    """Bundles the attention, scoring MLP and neighborhood stride."""

    def __init__(self, d: int, heads: int, k: int, rng: np.random.Generator):
        self.k = k
        self.attention = MultiHeadAttention(d, heads, rng)
        self.mlp = MLP(2 * d, d, 2, rng)

    def keep_probabilities(self, frames: Tensor) -> Tensor:
        m_local = local_difference(frames, self.k)
        m_global = global_difference(frames, self.attention)
        return frame_keep_probabilities(m_local, m_global, self.mlp)
