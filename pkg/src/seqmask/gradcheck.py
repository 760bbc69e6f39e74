"""Central finite-difference gradient checking.

Used by the unit tests, the acceptance suite and the ``gradcheck`` CLI
command. Non-scalar outputs are contracted with a fixed random projection so
every output element contributes to the checked scalar.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def numerical_gradient(
    f: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    index: int,
    step: float = DEFAULT_STEP,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``tensors[index]``.

    With ``coords`` only those flat positions are probed and a vector of
    their derivatives is returned; otherwise the full gradient array.
    """
    target = tensors[index]
    flat = target.data.reshape(-1)
    positions = np.arange(flat.size) if coords is None else np.asarray(coords)
    num = np.zeros(len(positions))
    with no_grad():
        for j, i in enumerate(positions):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(*tensors).data)
            flat[i] = orig - step
            lo = float(f(*tensors).data)
            flat[i] = orig
            num[j] = (hi - lo) / (2.0 * step)
    if coords is None:
        return num.reshape(target.shape)
    return num


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, falling back to absolute near zero."""
    a = np.linalg.norm(np.ravel(analytic))
    n = np.linalg.norm(np.ravel(numeric))
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    denom = max(a, n)
    return float(diff if denom < 1e-8 else diff / denom)


def gradient_check(
    f: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    step: float = DEFAULT_STEP,
    max_coords: int | None = None,
) -> float:
    """Max relative error between analytic and numerical gradients of ``f``.

    Gradients are checked for every input with ``requires_grad`` set. With
    ``max_coords``, larger tensors are probed at a random coordinate subset,
    which keeps end-to-end checks affordable; repeated instances then cover
    different coordinates.
    """
    with no_grad():
        out_shape = f(*tensors).shape

    if out_shape == ():
        scalar_f = f
    else:
        proj = Tensor(rng.standard_normal(out_shape))

        def scalar_f(*ts):
            return (f(*ts) * proj).sum()

    for t in tensors:
        t.grad = None
    scalar_f(*tensors).backward()

    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = rng.choice(t.data.size, size=max_coords, replace=False)
            analytic = analytic.reshape(-1)[coords]
        numeric = numerical_gradient(scalar_f, list(tensors), i, step=step, coords=coords)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ----------------------------------------------------------------- op suite

@dataclass
class OpCheck:
    """Result of finite-difference checking one named operation."""

    name: str
    instances: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _away_from_kinks(x: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Shift values out of the +-margin band around 0, where relu and the
    divide guard are non-smooth and finite differences straddle the kink."""
    return np.where(np.abs(x) < margin, x + np.where(x >= 0, 2 * margin, -2 * margin), x)


def _t(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _op_builders() -> dict[str, Callable]:
    from .keyframe import (
        KeyframeHead,
        frame_keep_probabilities,
        global_difference,
        local_difference,
        recon_loss,
    )
    from .masking import token_fuse
    from .nn import GRU, MLP, Linear, MultiHeadAttention, TransformerEncoder
    from .tensor import concat, cross_entropy, l2norm, l2norm_rows

    def add(rng):
        return lambda a, b: a + b, [_t(rng, 2, 3), _t(rng, 3)]

    def sub(rng):
        return lambda a, b: a - b, [_t(rng, 2, 3), _t(rng, 2, 3)]

    def mul(rng):
        return lambda a, b: a * b, [_t(rng, 2, 3), _t(rng, 3)]

    def div(rng):
        a = _t(rng, 2, 3)
        b = Tensor(_away_from_kinks(rng.standard_normal(3), 0.5), requires_grad=True)
        return lambda x, y: x / y, [a, b]

    def power(rng):
        x = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)), requires_grad=True)
        return lambda a: a**3, [x]

    def matmul(rng):
        return lambda a, b: a @ b, [_t(rng, 2, 3, 4), _t(rng, 4, 2)]

    def sum_axis(rng):
        return lambda a: a.sum(axis=1), [_t(rng, 2, 3, 2)]

    def mean_axis(rng):
        return lambda a: a.mean(axis=(0, 2)), [_t(rng, 2, 3, 2)]

    def exp(rng):
        return lambda a: a.exp(), [_t(rng, 2, 3)]

    def log(rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
        return lambda a: a.log(), [x]

    def sqrt(rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
        return lambda a: a.sqrt(), [x]

    def tanh(rng):
        return lambda a: a.tanh(), [_t(rng, 2, 3)]

    def sigmoid(rng):
        return lambda a: a.sigmoid(), [_t(rng, 2, 3)]

    def relu(rng):
        x = Tensor(_away_from_kinks(rng.standard_normal((2, 3))), requires_grad=True)
        return lambda a: a.relu(), [x]

    def softmax(rng):
        return lambda a: a.softmax(axis=-1), [_t(rng, 2, 4)]

    def reshape(rng):
        return lambda a: a.reshape(3, 4), [_t(rng, 2, 3, 2)]

    def swapaxes(rng):
        return lambda a: a.swapaxes(0, 2), [_t(rng, 2, 3, 2)]

    def getitem(rng):
        return lambda a: a[1:, 0, :], [_t(rng, 3, 2, 3)]

    def concat_op(rng):
        return lambda a, b: concat([a, b], axis=1), [_t(rng, 2, 2), _t(rng, 2, 3)]

    def cross_entropy_op(rng):
        labels = rng.integers(0, 3, size=4)
        return lambda l: cross_entropy(l, labels), [_t(rng, 4, 3)]

    def l2norm_op(rng):
        return l2norm, [_t(rng, 5)]

    def l2norm_rows_op(rng):
        return l2norm_rows, [_t(rng, 3, 4)]

    def linear(rng):
        layer = Linear(3, 2, rng)
        return lambda x, *ps: layer(x), [_t(rng, 2, 3)] + layer.parameters()

    def mlp(rng):
        net = MLP(3, 4, 2, rng)
        return lambda x, *ps: net(x), [_t(rng, 2, 3)] + net.parameters()

    def attention(rng):
        mha = MultiHeadAttention(4, 2, rng)
        return lambda x, *ps: mha(x, x, x), [_t(rng, 2, 3, 4)] + mha.parameters()

    def gru(rng):
        net = GRU(3, 4, rng)
        return lambda x, *ps: net(x), [_t(rng, 2, 3, 3)] + net.parameters()

    def transformer(rng):
        enc = TransformerEncoder(4, 2, rng)
        return lambda x, *ps: enc(x), [_t(rng, 2, 3, 4)] + enc.parameters()

    def token_fuse_op(rng):
        return token_fuse, [_t(rng, 2, 3, 4), _t(rng, 4)]

    def local_difference_op(rng):
        return lambda f: local_difference(f, 2), [_t(rng, 2, 5, 3)]

    def global_difference_op(rng):
        mha = MultiHeadAttention(4, 2, rng)
        return (
            lambda f, *ps: global_difference(f, mha),
            [_t(rng, 2, 4, 4)] + mha.parameters(),
        )

    def keep_probabilities(rng):
        head = KeyframeHead(4, 2, 2, rng)
        return (
            lambda f, *ps: head.keep_probabilities(f),
            [_t(rng, 2, 4, 4)] + head.parameters(),
        )

    def gumbel_soft(rng):
        # The tempered soft sample behind the straight-through decision,
        # with the Gumbel noise held fixed across difference evaluations.
        noise = -np.log(-np.log(rng.random((2, 4, 2)) + 1e-20) + 1e-20)
        pi = Tensor(rng.uniform(0.2, 0.8, size=(2, 4, 2)), requires_grad=True)

        def f(p):
            return (((p + 1e-30).log() + Tensor(noise)) * (1.0 / 0.7)).softmax(axis=-1)

        return f, [pi]

    def recon_loss_op(rng):
        net = GRU(3, 3, rng)
        return (
            lambda kept, full, *ps: recon_loss(kept, full, net),
            [_t(rng, 2, 4, 3), _t(rng, 2, 4, 3)] + net.parameters(),
        )

    def frame_probability_pipeline(rng):
        head = KeyframeHead(4, 2, 2, rng)

        def f(frames, *ps):
            ml = local_difference(frames, head.k)
            mg = global_difference(frames, head.attention)
            return frame_keep_probabilities(ml, mg, head.mlp)

        return f, [_t(rng, 1, 4, 4)] + head.parameters()

    return {
        "add": add,
        "sub": sub,
        "mul": mul,
        "div": div,
        "pow": power,
        "matmul": matmul,
        "sum": sum_axis,
        "mean": mean_axis,
        "exp": exp,
        "log": log,
        "sqrt": sqrt,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "relu": relu,
        "softmax": softmax,
        "reshape": reshape,
        "swapaxes": swapaxes,
        "index": getitem,
        "concat": concat_op,
        "cross_entropy": cross_entropy_op,
        "l2norm": l2norm_op,
        "l2norm_rows": l2norm_rows_op,
        "linear": linear,
        "mlp": mlp,
        "attention": attention,
        "gru": gru,
        "transformer_encoder": transformer,
        "token_fuse": token_fuse_op,
        "local_difference": local_difference_op,
        "global_difference": global_difference_op,
        "keyframe_probabilities": keep_probabilities,
        "gumbel_soft_sample": gumbel_soft,
        "recon_loss": recon_loss_op,
        "keyframe_pipeline": frame_probability_pipeline,
        "forward_text_path": _forward_text_builder,
        "forward_pair_path": _forward_pair_builder,
    }


def _fd_model(rng: np.random.Generator, keyframe: bool):
    """A tiny classifier whose non-differentiable parts are frozen.

    Mask magnitudes and thresholds train through a surrogate, not the true
    step derivative, so they are excluded from finite-difference checks;
    their backward rule is verified against its closed form elsewhere.
    """
    from .model import ModelConfig, SequenceClassifier

    cfg = ModelConfig(
        d_text=4,
        d_video=4,
        tokens_text=2,
        frames_video=3,
        heads=2,
        keyframe=keyframe,
        keyframe_k=1,
        epochs=0,
        train_encoders=True,
        seed=int(rng.integers(2**31)),
    )
    model = SequenceClassifier(cfg)
    for state in (model.mask_text, model.mask_video):
        state.magnitude.requires_grad = False
        state.threshold.requires_grad = False
    return model


def _forward_text_builder(rng):
    from .tensor import cross_entropy

    model = _fd_model(rng, keyframe=False)
    labels = rng.integers(0, 3, size=2)
    params = [
        p
        for name, p in model.named_parameters()
        if name.split(".")[0] in ("enc_text", "head_single")
    ]

    def f(x, *ps):
        return cross_entropy(model.head_single(model.fused_text(x)), labels)

    return f, [_t(rng, 2, 2, 4)] + params


def _forward_pair_builder(rng):
    from .tensor import cross_entropy

    model = _fd_model(rng, keyframe=False)
    labels = rng.integers(0, 3, size=2)
    params = [
        p
        for name, p in model.named_parameters()
        if name.split(".")[0] in ("enc_text", "enc_video", "head_pair")
    ]

    def f(xt, xv, *ps):
        return cross_entropy(model._eval_pair_logits(xt, xv), labels)

    return f, [_t(rng, 2, 2, 4), _t(rng, 2, 3, 4)] + params


def run_op_suite(
    instances: int = 100,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOL,
    names: Sequence[str] | None = None,
    max_coords: int = 5,
) -> list[OpCheck]:
    """Finite-difference check every named op on fresh random instances."""
    builders = _op_builders()
    if names is None:
        names = list(builders)
    unknown = sorted(set(names) - set(builders))
    if unknown:
        raise ValueError(f"unknown ops: {unknown}")

    results = []
    for name in names:
        rng = np.random.default_rng(seed + zlib.crc32(name.encode()) % 100000)
        worst = 0.0
        for _ in range(instances):
            f, tensors = builders[name](rng)
            worst = max(
                worst, gradient_check(f, tensors, rng, step=step, max_coords=max_coords)
            )
        results.append(
            OpCheck(name=name, instances=instances, max_rel_err=worst, tolerance=tolerance)
        )
    return results
