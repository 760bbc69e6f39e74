"""Learnable sparse feature masks.

A mask over ``d`` feature coordinates is parameterized by magnitudes ``r``
and thresholds ``s``. The forward pass is an exact unit step: coordinate
``i`` is retained iff ``|r_i| >= s_i``, and retained coordinates are scaled
by ``r_i``. The step has zero derivative almost everywhere, so the backward
pass substitutes a piecewise-linear surrogate for its derivative; gradients
on the masked input itself are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module
from .tensor import Tensor, _accum, _node


def unit_step(t) -> np.ndarray:
    """0 where t < 0, 1 where t >= 0."""
    return np.where(np.asarray(t, dtype=np.float64) >= 0.0, 1.0, 0.0)


def surrogate_step_grad(t) -> np.ndarray:
    """Surrogate derivative of the unit step.

    2 - 4|t| for |t| <= 0.4, then 0.4 out to |t| <= 1, then 0.
    """
    a = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(a <= 0.4, 2.0 - 4.0 * a, np.where(a <= 1.0, 0.4, 0.0))


class MaskState(Module):
    """Learnable magnitudes and thresholds for one modality's features."""

    def __init__(
        self,
        d: int,
        rng: np.random.Generator,
        modality: str = "",
        magnitude_scale: float = 0.5,
        threshold_init: float = 0.05,
    ):
        self.magnitude = Tensor(rng.uniform(-magnitude_scale, magnitude_scale, size=d), requires_grad=True)
        self.threshold = Tensor(np.full(d, float(threshold_init)), requires_grad=True)
        self.modality = modality

    @property
    def dim(self) -> int:
        return self.magnitude.data.shape[0]


def probabilities(state: MaskState) -> np.ndarray:
    """The exact (binary) retention indicator p per coordinate."""
    return unit_step(np.abs(state.magnitude.data) - state.threshold.data)


def support(state: MaskState) -> np.ndarray:
    """Indices of retained coordinates."""
    return np.flatnonzero(probabilities(state))


def retained_fraction(state: MaskState) -> float:
    return float(probabilities(state).mean())


def mask_vector(state: MaskState) -> Tensor:
    """The mask m = r * step(|r| - s) as a graph node.

    Backward routes upstream gradient g to r as g * (p + r * F'(t) * sign(r))
    and to s as -g * r * F'(t), with F' the surrogate derivative and
    sign(0) = 0.
    """
    r, s = state.magnitude, state.threshold
    t = np.abs(r.data) - s.data
    p = unit_step(t)

    def bw():
        g = out.grad
        fp = surrogate_step_grad(t)
        _accum(r, g * (p + r.data * fp * np.sign(r.data)))
        _accum(s, g * (-r.data * fp))

    out = _node(r.data * p, (r, s), bw)
    return out


def apply_mask(x: Tensor, state: MaskState) -> Tensor:
    """Masked features x * m, broadcasting m over leading token/batch axes."""
    if x.shape[-1] != state.dim:
        raise ValueError(
            f"last input dimension {x.shape[-1]} does not match mask width {state.dim}"
        )
    return x * mask_vector(state)


def sparse_loss(state: MaskState) -> Tensor:
    """Sum of exp(-s): pushes thresholds up, masking more coordinates."""
    return (-state.threshold).exp().sum()


def _cosine_rows(x: Tensor, m: Tensor) -> Tensor:
    """Cosine similarity of each token row of x with m; 0 where a norm is 0."""
    xn = np.sqrt((x.data**2).sum(axis=-1))
    mn = float(np.sqrt((m.data**2).sum()))
    dot = x.data @ m.data
    denom = xn * mn
    ok = denom > 0.0
    c = np.where(ok, dot / np.where(ok, denom, 1.0), 0.0)

    def bw():
        g = np.where(ok, out.grad, 0.0)
        safe = np.where(ok, denom, 1.0)
        safe_xn2 = np.where(xn > 0.0, xn, 1.0) ** 2
        gx = (g / safe)[..., None] * m.data - (g * c / safe_xn2)[..., None] * x.data
        lead = tuple(range(x.data.ndim - 1))
        gm = ((g / safe)[..., None] * x.data).sum(axis=lead)
        if mn > 0.0:
            gm -= (g * c).sum() / mn**2 * m.data
        _accum(x, gx)
        _accum(m, gm)

    out = _node(c, (x, m), bw)
    return out


def token_fuse(x_c: Tensor, m: Tensor) -> Tensor:
    """Fuse masked tokens (..., tokens, d) into one vector (..., d).

    Each token is weighted by a softmax over its cosine similarity with the
    mask vector; all-zero tokens (or a zero mask) get similarity 0, so a
    fully-masked input fuses to the plain token mean.
    """
    if x_c.shape[-1] != m.shape[-1]:
        raise ValueError(f"token width {x_c.shape[-1]} does not match mask width {m.shape[-1]}")
    weights = _cosine_rows(x_c, m).softmax(axis=-1)
    tau = weights.shape[-1]
    lead = weights.shape[:-1]
    w2 = weights.reshape(lead + (1, tau))
    fused = w2 @ x_c
    return fused.reshape(lead + (x_c.shape[-1],))


@dataclass
class MaskedFeatures:
    """Masked tokens plus the fused vector and mask diagnostics."""

    x_c: Tensor
    fused: Tensor
    retained_fraction: float
    support: np.ndarray


def masked_features(x: Tensor, state: MaskState) -> MaskedFeatures:
    x_c = apply_mask(x, state)
    fused = token_fuse(x_c, mask_vector(state))
    return MaskedFeatures(x_c, fused, retained_fraction(state), support(state))
