"""Synthetic multimodal data with a known causal structure.

A shared confounder u drives half of each modality's invariant features; the
rest are exogenous. The label is a fixed-quantile discretization of a linear
score over the invariant features of both modalities plus noise, so its
conditional given the invariant features is identical in every domain.
Spurious features are non-ancestors of the label: they receive a
label-correlated component, a coupling to an exogenous invariant feature and
a confounder component, all scaled by the domain's sign and strength. With
strength 0 they are pure noise; flipping the sign flips their label
correlation. Remaining coordinates are i.i.d. noise. Each feature vector is
tiled into tokens/frames with small per-token jitter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

TOKEN_JITTER = 0.05
TERCILE = float(stats.norm.ppf(2.0 / 3.0))


@dataclass(frozen=True)
class ModalitySpec:
    """Feature layout and label weights for one modality."""

    d: int
    invariant: tuple[int, ...]
    spurious: tuple[int, ...]
    label_weights: tuple[float, ...]

    def __post_init__(self):
        inv, spu = set(self.invariant), set(self.spurious)
        if not self.invariant:
            raise ValueError("each modality needs at least one invariant feature")
        if inv & spu:
            raise ValueError(f"invariant and spurious supports overlap: {sorted(inv & spu)}")
        for idx in inv | spu:
            if not 0 <= idx < self.d:
                raise ValueError(f"feature index {idx} outside [0, {self.d})")
        if len(self.label_weights) != len(self.invariant):
            raise ValueError(
                f"{len(self.label_weights)} weights for {len(self.invariant)} invariant features"
            )

    @property
    def noise(self) -> tuple[int, ...]:
        used = set(self.invariant) | set(self.spurious)
        return tuple(i for i in range(self.d) if i not in used)


@dataclass(frozen=True)
class CausalSpec:
    """The full structural model shared by all domains."""

    text: ModalitySpec
    video: ModalitySpec
    tokens_text: int = 4
    frames_video: int = 6
    confounder_scale: float = 0.8
    invariant_noise: float = 0.6
    label_noise: float = 1.0
    spurious_edge: float = 0.5
    spurious_confounder: float = 0.5
    spurious_noise: float = 0.5
    noise_scale: float = 1.0
    token_jitter: float = TOKEN_JITTER

    def modality(self, name: str) -> ModalitySpec:
        if name == "text":
            return self.text
        if name == "video":
            return self.video
        raise ValueError(f"unknown modality {name!r}")

    @property
    def u_dim(self) -> int:
        return _n_driven(self.text) + _n_driven(self.video)

    @property
    def score_std(self) -> float:
        """Closed-form std of the continuous label score."""
        v_inv = self.confounder_scale**2 + self.invariant_noise**2
        w2 = sum(w * w for m in (self.text, self.video) for w in m.label_weights)
        return math.sqrt(v_inv * w2 + self.label_noise**2)

    @property
    def label_thresholds(self) -> tuple[float, float]:
        """Fixed tercile cut points of the score; identical across domains."""
        t = TERCILE * self.score_std
        return (-t, t)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    n: int
    spurious_sign: int = 1
    spurious_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.spurious_sign not in (-1, 1):
            raise ValueError(f"spurious sign must be +1 or -1, got {self.spurious_sign}")
        if self.n < 1:
            raise ValueError("domain needs at least one sample")
        if self.spurious_strength < 0:
            raise ValueError("spurious strength must be >= 0")


@dataclass
class Sample:
    id: str
    domain: str
    label: int
    text: np.ndarray
    video: np.ndarray


def _n_driven(m: ModalitySpec) -> int:
    """Number of confounder-driven invariant features (the leading half)."""
    return (len(m.invariant) + 1) // 2


def _wiring(spec: CausalSpec) -> dict:
    """Deterministic assignment of confounder axes and edge pairings."""
    axes = {}
    offset = 0
    for name in ("text", "video"):
        m = spec.modality(name)
        k = _n_driven(m)
        axes[name] = {
            "driven": m.invariant[:k],
            "driven_axes": list(range(offset, offset + k)),
            "exogenous": m.invariant[k:],
        }
        offset += k
    return axes


def _draw(
    spec: CausalSpec,
    domain: DomainSpec,
    rng: np.random.Generator,
    n: int,
    do: tuple[str, int, float] | None = None,
):
    """Sample n rows of per-modality feature vectors plus labels.

    ``do`` applies a truncated-factorization intervention: the feature is
    forced to the given value, its own mechanism is skipped, and everything
    downstream (including the label, for invariant features) is generated
    from the forced value.
    """
    wiring = _wiring(spec)
    u = rng.standard_normal((n, spec.u_dim))
    v_inv = math.sqrt(spec.confounder_scale**2 + spec.invariant_noise**2)
    base = {name: np.zeros((n, spec.modality(name).d)) for name in ("text", "video")}

    for name in ("text", "video"):
        w = wiring[name]
        for idx, axis in zip(w["driven"], w["driven_axes"]):
            base[name][:, idx] = (
                spec.confounder_scale * u[:, axis]
                + spec.invariant_noise * rng.standard_normal(n)
            )
        for idx in w["exogenous"]:
            base[name][:, idx] = v_inv * rng.standard_normal(n)

    if do is not None and do[1] in spec.modality(do[0]).invariant:
        base[do[0]][:, do[1]] = do[2]

    score = spec.label_noise * rng.standard_normal(n)
    for name in ("text", "video"):
        m = spec.modality(name)
        score += base[name][:, list(m.invariant)] @ np.asarray(m.label_weights)
    lo, hi = spec.label_thresholds
    labels = np.digitize(score, [lo, hi]).astype(np.int64)
    enc = (labels - 1).astype(np.float64)
    middle = labels == 1

    for name in ("text", "video"):
        m = spec.modality(name)
        w = wiring[name]
        for j, idx in enumerate(m.spurious):
            # The label enters through a sign code: -1/+1 for the extreme
            # classes and an independent random sign for the middle class,
            # so spurious magnitudes carry no class information and only
            # the (domain-flippable) sign correlates with the label.
            systematic = enc.copy()
            if middle.any():
                systematic[middle] = (
                    rng.integers(0, 2, size=int(middle.sum())) * 2.0 - 1.0
                )
            if w["exogenous"]:
                pair = w["exogenous"][j % len(w["exogenous"])]
                systematic += spec.spurious_edge * base[name][:, pair]
            conf_axis = w["driven_axes"][j % len(w["driven_axes"])]
            systematic += spec.spurious_confounder * u[:, conf_axis]
            base[name][:, idx] = (
                domain.spurious_sign * domain.spurious_strength * systematic
                + spec.spurious_noise * rng.standard_normal(n)
            )
        noise_idx = list(m.noise)
        if noise_idx:
            base[name][:, noise_idx] = spec.noise_scale * rng.standard_normal(
                (n, len(noise_idx))
            )

    if do is not None and do[1] not in spec.modality(do[0]).invariant:
        base[do[0]][:, do[1]] = do[2]

    text = base["text"][:, None, :] + spec.token_jitter * rng.standard_normal(
        (n, spec.tokens_text, spec.text.d)
    )
    video = base["video"][:, None, :] + spec.token_jitter * rng.standard_normal(
        (n, spec.frames_video, spec.video.d)
    )
    return text, video, labels


def generate_domain(spec: CausalSpec, domain: DomainSpec) -> list[Sample]:
    """All samples of one domain, reproducible from the domain seed."""
    rng = np.random.default_rng(domain.seed)
    text, video, labels = _draw(spec, domain, rng, domain.n)
    return [
        Sample(
            id=f"{domain.name}-{i:05d}",
            domain=domain.name,
            label=int(labels[i]),
            text=text[i],
            video=video[i],
        )
        for i in range(domain.n)
    ]


def generate_dataset(spec: CausalSpec, domains: Sequence[DomainSpec]) -> list[Sample]:
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate domain names: {names}")
    out: list[Sample] = []
    for domain in domains:
        out.extend(generate_domain(spec, domain))
    return out


def intervene(
    spec: CausalSpec,
    domain: DomainSpec,
    modality: str,
    feature_index: int,
    value: float,
    rng: np.random.Generator,
    n: int = 1,
) -> list[Sample]:
    """Fresh samples under do(feature = value) in the given domain.

    Interventions on invariant features shift the label distribution;
    interventions on spurious or noise features cannot, because they are
    non-ancestors of the label.
    """
    m = spec.modality(modality)
    if not 0 <= feature_index < m.d:
        raise ValueError(f"feature index {feature_index} outside [0, {m.d})")
    text, video, labels = _draw(
        spec, domain, rng, n, do=(modality, feature_index, float(value))
    )
    return [
        Sample(
            id=f"do-{modality}-{feature_index}-{i:05d}",
            domain=domain.name,
            label=int(labels[i]),
            text=text[i],
            video=video[i],
        )
        for i in range(n)
    ]


def ground_truth_support(spec: CausalSpec) -> dict:
    """Invariant/spurious/noise index sets per modality, for mask scoring."""
    return {
        name: {
            "invariant": list(spec.modality(name).invariant),
            "spurious": list(spec.modality(name).spurious),
            "noise": list(spec.modality(name).noise),
        }
        for name in ("text", "video")
    }


def default_spec(
    d: int = 64,
    n_invariant: int = 8,
    n_spurious: int = 8,
    tokens_text: int = 4,
    frames_video: int = 6,
    text_weight: float = 1.0,
    video_weight: float = 1.0,
) -> CausalSpec:
    """The standard benchmark layout: leading invariant block, then spurious,
    the rest noise, in both modalities.

    Label weights decay across each invariant block so the leading features
    are individually load-bearing rather than interchangeable; an equal-weight
    block would leave every coordinate redundant and give a sparsity
    regularizer nothing to discriminate on.
    """
    inv = tuple(range(n_invariant))
    spu = tuple(range(n_invariant, n_invariant + n_spurious))
    profile = tuple(2.0 * 0.8**j for j in range(n_invariant))
    return CausalSpec(
        text=ModalitySpec(d, inv, spu, tuple(text_weight * w for w in profile)),
        video=ModalitySpec(d, inv, spu, tuple(video_weight * w for w in profile)),
        tokens_text=tokens_text,
        frames_video=frames_video,
        label_noise=0.6,
    )


def default_domains(
    n: int = 2000, strength: float = 1.0, base_seed: int = 100
) -> list[DomainSpec]:
    """Two source domains with opposite spurious signs plus one target.

    The second source carries the spurious correlation at reduced strength,
    so pooled training data still has a net spurious signal for an unmasked
    model to absorb; the target runs it at full strength with the opposite
    sign of that net signal.
    """
    return [
        DomainSpec("src_pos", n, spurious_sign=1, spurious_strength=strength, seed=base_seed),
        DomainSpec("src_neg", n, spurious_sign=-1, spurious_strength=0.6 * strength, seed=base_seed + 1),
        DomainSpec("target", n, spurious_sign=-1, spurious_strength=strength, seed=base_seed + 2),
    ]
