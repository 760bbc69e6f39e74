"""Two-modality sequence classifier with learned sparse feature masks.

Each modality runs token sequence -> residual encoder -> sparse mask ->
cosine-weighted token fusion -> linear head. Video additionally passes a
keyframe selector before its encoder and carries a GRU reconstruction
penalty that keeps the kept-frame encoding close to the full clip.

Training is staged. In the sequential orders one modality trains alone
against a single-modality head, is then frozen, and the other modality
trains conditioned on the frozen fused vector through a wider head over
the concatenation [first ; second]. The joint order trains both pathways
at once against the wide head. The final predictor is always the wide
head; frozen parameters are never touched again, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .keyframe import KeyframeHead, apply_decision, recon_loss, sample_decision
from .masking import (
    MaskState,
    masked_features,
    probabilities,
    retained_fraction,
    sparse_loss,
    support,
    token_fuse,
)
from .nn import GRU, Linear, Module, TransformerEncoder
from .optim import Adam
from .synthgen import Sample
from .tensor import Tensor, concat, cross_entropy, no_grad

ORDERS = ("t2v", "v2t", "joint")


class NumericalInstability(RuntimeError):
    """Raised when a training loss stops being finite.

    Carries enough context (stage, epoch, batch, learning rate) to report
    the failure without digging through logs.
    """

    def __init__(self, stage: str, epoch: int, batch: int, lr: float):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        super().__init__(
            f"loss became non-finite in stage {stage!r} at epoch {epoch}, "
            f"batch {batch} (lr={lr:g}); lower the learning rate or extend warm-up"
        )


@dataclass(frozen=True)
class ModelConfig:
    d_text: int = 64
    d_video: int = 64
    tokens_text: int = 4
    frames_video: int = 6
    classes: int = 3
    order: str = "t2v"
    alpha: float = 1e-2
    alpha_warmup_epochs: int = 15
    epochs: int = 60
    batch_size: int = 16
    lr: float = 7e-5
    mask_lr_scale: float = 1.0
    warmup_epochs: int = 3
    heads: int = 4
    keyframe: bool = True
    keyframe_k: int = 2
    train_encoders: bool = False
    temperature: float = 1.0
    temperature_decay: float = 0.97
    temperature_floor: float = 0.1
    val_fraction: float = 0.15
    magnitude_scale: float = 0.5
    threshold_init: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.alpha_warmup_epochs < 0:
            raise ValueError(
                f"alpha_warmup_epochs must be >= 0, got {self.alpha_warmup_epochs}"
            )
        if self.mask_lr_scale <= 0.0:
            raise ValueError(
                f"mask_lr_scale must be positive, got {self.mask_lr_scale}"
            )
        if self.d_text < 1 or self.d_video < 1 or self.classes < 2:
            raise ValueError("feature dims must be positive and classes >= 2")


@dataclass
class EpochReport:
    """One training epoch: loss components, accuracies, mask occupancy.

    ``loss`` is the optimized total and decomposes as
    ``ce_loss + alpha * sparse_loss + recon_loss``. Accuracies are grouped
    by domain name; ``val_overall`` pools the whole validation split and
    drives best-epoch selection.
    """

    stage: str
    epoch: int
    ce_loss: float
    sparse_loss: float
    recon_loss: float
    loss: float
    alpha: float
    train_accuracy: dict[str, float]
    val_accuracy: dict[str, float]
    val_overall: float
    retained_text: float
    retained_video: float
    temperature: float
    lr: float


@dataclass
class StageReport:
    """One curriculum stage: its epochs plus the mask supports it ends on."""

    stage: str
    head: str
    epochs: list[EpochReport]
    supports: dict[str, list[int]]


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    text = np.stack([s.text for s in samples])
    video = np.stack([s.video for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return text, video, labels


def accuracy_by_domain(
    preds: np.ndarray, labels: np.ndarray, domains: np.ndarray
) -> dict[str, float]:
    out: dict[str, float] = {}
    for name in sorted(set(domains.tolist())):
        hit = domains == name
        out[name] = float((preds[hit] == labels[hit]).mean())
    return out


class SequenceClassifier(Module):
    def __init__(self, config: ModelConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        dt, dv, k = config.d_text, config.d_video, config.classes
        self.enc_text = TransformerEncoder(dt, config.heads, rng)
        self.enc_video = TransformerEncoder(dv, config.heads, rng)
        self.keyframe = KeyframeHead(dv, config.heads, config.keyframe_k, rng)
        self.recon_gru = GRU(dv, dv, rng)
        self.mask_text = MaskState(
            dt, rng, "text", config.magnitude_scale, config.threshold_init
        )
        self.mask_video = MaskState(
            dv, rng, "video", config.magnitude_scale, config.threshold_init
        )
        d_first = dv if config.order == "v2t" else dt
        self.head_single = Linear(d_first, k, rng)
        self.head_pair = Linear(dt + dv, k, rng)
        if not config.train_encoders:
            # Encoders act as fixed feature maps (the frozen-extractor
            # setting): masks cannot be bypassed by re-routing signal
            # through retrained encoder weights.
            for module in (self.enc_text, self.enc_video):
                for p in module.parameters():
                    p.requires_grad = False

    # ---------------------------------------------------------------- forward

    def fused_text(self, x_text: Tensor) -> Tensor:
        h = self.enc_text(x_text)
        return masked_features(h, self.mask_text).fused

    def fused_video(
        self,
        frames: Tensor,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
        use_keyframe: bool | None = None,
    ) -> tuple[Tensor, Tensor | None]:
        """Fused video vector plus the reconstruction penalty (None when the
        keyframe selector is off)."""
        if use_keyframe is None:
            use_keyframe = self.config.keyframe
        recon = None
        kept = frames
        if use_keyframe:
            pi = self.keyframe.keep_probabilities(frames)
            decision = sample_decision(pi, mode=mode, rng=rng, temperature=temperature)
            kept = apply_decision(frames, decision)
            recon = recon_loss(kept, frames, self.recon_gru)
        h = self.enc_video(kept)
        return masked_features(h, self.mask_video).fused, recon

    def _pair_order(self) -> tuple[str, str]:
        return ("video", "text") if self.config.order == "v2t" else ("text", "video")

    def _pair_logits(self, fused: Mapping[str, Tensor]) -> Tensor:
        first, second = self._pair_order()
        return self.head_pair(concat([fused[first], fused[second]], axis=-1))

    # ---------------------------------------------------------------- training

    def _module_groups(self) -> dict[str, list[str]]:
        groups = {"text": ["mask_text"], "video": ["mask_video"]}
        if self.config.train_encoders:
            groups["text"].append("enc_text")
            groups["video"].append("enc_video")
        if self.config.keyframe:
            groups["video"] += ["keyframe", "recon_gru"]
        groups["joint"] = groups["text"] + groups["video"]
        return groups

    def _stage_parameters(self, stage: str, head: str) -> dict[str, Tensor]:
        wanted = set(self._module_groups()[stage]) | {head}
        if stage == "joint":
            # The joint order optimizes both stage losses at once, so the
            # single-modality head trains alongside the pair head.
            wanted.add("head_single")
        return {
            name: p
            for name, p in self.named_parameters()
            if name.split(".")[0] in wanted
        }

    def _stage_plan(self) -> list[tuple[str, str, int]]:
        cfg = self.config
        if cfg.order == "joint":
            return [("joint", "head_pair", cfg.epochs)]
        first = "text" if cfg.order == "t2v" else "video"
        second = "video" if cfg.order == "t2v" else "text"
        e1 = cfg.epochs // 2
        return [(first, "head_single", e1), (second, "head_pair", cfg.epochs - e1)]

    def _stage_loss(
        self,
        stage: str,
        head: str,
        xt: Tensor,
        xv: Tensor,
        labels: np.ndarray,
        rng: np.random.Generator,
        temperature: float,
        alpha: float,
    ) -> tuple[Tensor, dict[str, float], np.ndarray]:
        """Total stage loss, its components, and the batch predictions.

        The components satisfy total = ce + alpha * sparse + recon exactly;
        ``sparse`` is the raw mask penalty before weighting.
        """
        fused: dict[str, Tensor] = {}
        sparse = Tensor(0.0)
        recon = Tensor(0.0)

        if stage in ("text", "joint"):
            fused["text"] = self.fused_text(xt)
            sparse = sparse + sparse_loss(self.mask_text)
        if stage in ("video", "joint"):
            fused["video"], r = self.fused_video(
                xv, mode="train", rng=rng, temperature=temperature
            )
            sparse = sparse + sparse_loss(self.mask_video)
            if r is not None:
                recon = recon + r

        if head == "head_single":
            logits = self.head_single(fused[stage])
        else:
            with no_grad():
                if "text" not in fused:
                    fused["text"] = self.fused_text(xt)
                if "video" not in fused:
                    fused["video"], _ = self.fused_video(xv, mode="eval")
            logits = self._pair_logits(fused)

        ce = cross_entropy(logits, labels)
        if stage == "joint":
            # Both objectives at once: the pair-head loss above plus the
            # single-modality loss its own head would see in stage 1.
            ce = ce + cross_entropy(self.head_single(fused[self._pair_order()[0]]), labels)
        loss = ce + alpha * sparse + recon
        parts = {
            "ce": float(ce.data),
            "sparse": float(sparse.data),
            "recon": float(recon.data),
        }
        return loss, parts, np.argmax(logits.data, axis=-1)

    def _stage_val_predictions(
        self, stage: str, head: str, xt: np.ndarray, xv: np.ndarray
    ) -> np.ndarray:
        with no_grad():
            if head == "head_single":
                if stage == "text":
                    logits = self.head_single(self.fused_text(Tensor(xt)))
                else:
                    fv, _ = self.fused_video(Tensor(xv), mode="eval")
                    logits = self.head_single(fv)
            else:
                logits = self._eval_pair_logits(Tensor(xt), Tensor(xv))
        return np.argmax(logits.data, axis=-1)

    def train(self, samples: Sequence[Sample]) -> list[StageReport]:
        """Run the configured stage plan and return one report per stage.

        Every stage ends on the parameters of its best validation epoch.
        Train accuracy is accumulated from the minibatch predictions
        already produced for the loss, so it reflects training-mode
        keyframe sampling and costs no extra forward passes.
        """
        cfg = self.config
        data_rng = np.random.default_rng(cfg.seed + 1)
        gumbel_rng = np.random.default_rng(cfg.seed + 2)
        text, video, labels = stack_samples(samples)
        domains = np.array([s.domain for s in samples])
        n = len(samples)

        n_val = int(round(n * cfg.val_fraction))
        perm = data_rng.permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        if len(train_idx) == 0:
            raise ValueError("validation split leaves no training samples")

        plan = self._stage_plan()
        reports: list[StageReport] = []
        temperature = cfg.temperature
        global_epoch = 0

        for stage, head, stage_epochs in plan:
            if stage_epochs == 0:
                continue
            params = self._stage_parameters(stage, head)
            # Thresholds feel a constant sparsity push that Adam would
            # otherwise normalise to a full-rate sweep; slowing the mask
            # parameters lets the heads mature first, so surviving
            # coordinates reflect usefulness rather than early races.
            scales = {
                name: cfg.mask_lr_scale
                for name in params
                if name.split(".")[0] in ("mask_text", "mask_video")
            }
            opt = Adam(
                params,
                lr=cfg.lr,
                warmup_epochs=cfg.warmup_epochs,
                lr_scales=scales,
            )
            best_acc = -np.inf
            best_state: dict[str, np.ndarray] | None = None
            rows: list[EpochReport] = []

            for local_epoch in range(stage_epochs):
                opt.set_epoch(local_epoch)
                # Sparsity joins only once the stage's heads have matured:
                # with established weights, a coordinate's defense against
                # the threshold sweep reflects its marginal value, so
                # redundant blocks get pruned instead of whichever features
                # an early optimizer race happened to reach last.
                alpha = 0.0 if local_epoch < cfg.alpha_warmup_epochs else cfg.alpha
                order = data_rng.permutation(train_idx)
                sums = {"ce": 0.0, "sparse": 0.0, "recon": 0.0, "total": 0.0}
                train_preds = np.empty(len(order), dtype=np.int64)
                batches = 0
                for start in range(0, len(order), cfg.batch_size):
                    idx = order[start : start + cfg.batch_size]
                    loss, parts, preds = self._stage_loss(
                        stage,
                        head,
                        Tensor(text[idx]),
                        Tensor(video[idx]),
                        labels[idx],
                        gumbel_rng,
                        temperature,
                        alpha,
                    )
                    if not np.isfinite(loss.data):
                        raise NumericalInstability(
                            stage, global_epoch, start // cfg.batch_size, cfg.lr
                        )
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    train_preds[start : start + len(idx)] = preds
                    for key, value in parts.items():
                        sums[key] += value
                    sums["total"] += float(loss.data)
                    batches += 1

                val_preds = (
                    self._stage_val_predictions(
                        stage, head, text[val_idx], video[val_idx]
                    )
                    if n_val > 0
                    else np.empty(0, dtype=np.int64)
                )
                val_acc = (
                    float((val_preds == labels[val_idx]).mean())
                    if n_val > 0
                    else float("nan")
                )
                rows.append(
                    EpochReport(
                        stage=stage,
                        epoch=global_epoch,
                        ce_loss=sums["ce"] / batches,
                        sparse_loss=sums["sparse"] / batches,
                        recon_loss=sums["recon"] / batches,
                        loss=sums["total"] / batches,
                        alpha=alpha,
                        train_accuracy=accuracy_by_domain(
                            train_preds, labels[order], domains[order]
                        ),
                        val_accuracy=accuracy_by_domain(
                            val_preds, labels[val_idx], domains[val_idx]
                        ),
                        val_overall=val_acc,
                        retained_text=retained_fraction(self.mask_text),
                        retained_video=retained_fraction(self.mask_video),
                        temperature=temperature,
                        lr=opt.effective_lr(),
                    )
                )
                # Spurious features help in-domain validation, so epochs
                # before the sparsity term activates would always win the
                # snapshot and silently undo the pruning; only epochs
                # optimizing the full objective are eligible.
                eligible = cfg.alpha == 0.0 or local_epoch >= cfg.alpha_warmup_epochs
                if n_val > 0 and eligible and val_acc > best_acc:
                    best_acc = val_acc
                    best_state = {name: p.data.copy() for name, p in params.items()}
                temperature = max(
                    cfg.temperature_floor, temperature * cfg.temperature_decay
                )
                global_epoch += 1

            # Each stage hands over (and the final stage reports) the
            # parameters of its best validation epoch, not its last one.
            if best_state is not None:
                for name, value in best_state.items():
                    params[name].data = value
            reports.append(
                StageReport(
                    stage=stage,
                    head=head,
                    epochs=rows,
                    supports={
                        name: [int(i) for i in sup]
                        for name, sup in self.mask_supports().items()
                    },
                )
            )
        return reports

    # ---------------------------------------------------------------- inference

    def _eval_pair_logits(self, xt: Tensor, xv: Tensor) -> Tensor:
        fused_t = self.fused_text(xt)
        fused_v, _ = self.fused_video(xv, mode="eval")
        return self._pair_logits({"text": fused_t, "video": fused_v})

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        """Class predictions from the final (wide-head) predictor."""
        text, video, _ = stack_samples(samples)
        with no_grad():
            logits = self._eval_pair_logits(Tensor(text), Tensor(video))
        return np.argmax(logits.data, axis=-1)

    def accuracy(self, samples: Sequence[Sample]) -> float:
        labels = np.array([s.label for s in samples])
        return float((self.predict(samples) == labels).mean())

    def evaluate(self, by_domain: Mapping[str, Sequence[Sample]]) -> dict[str, float]:
        return {name: self.accuracy(list(seq)) for name, seq in by_domain.items()}

    # ---------------------------------------------------------------- ablations

    def evaluate_ablation(
        self,
        samples: Sequence[Sample],
        which: str,
        rng: np.random.Generator | None = None,
    ) -> float:
        """Accuracy of the final predictor under one evaluation-time ablation.

        ``add_noise`` feeds Gaussian vectors to the head in place of both
        fused representations; ``using_ds`` fuses through the complement of
        each learned mask (the coordinates the model chose to remove);
        ``no_keyframe`` skips frame selection and encodes the full clip.
        """
        text, video, labels = stack_samples(samples)
        xt, xv = Tensor(text), Tensor(video)
        with no_grad():
            if which == "add_noise":
                if rng is None:
                    rng = np.random.default_rng(self.config.seed + 3)
                fused = {
                    "text": Tensor(rng.normal(size=(len(samples), self.config.d_text))),
                    "video": Tensor(rng.normal(size=(len(samples), self.config.d_video))),
                }
                logits = self._pair_logits(fused)
            elif which == "using_ds":
                fused = {
                    "text": self._complement_fused(self.enc_text(xt), self.mask_text),
                    "video": self._complement_fused(
                        self._kept_frames_encoded(xv), self.mask_video
                    ),
                }
                logits = self._pair_logits(fused)
            elif which == "no_keyframe":
                fused_t = self.fused_text(xt)
                fused_v, _ = self.fused_video(xv, mode="eval", use_keyframe=False)
                logits = self._pair_logits({"text": fused_t, "video": fused_v})
            else:
                raise ValueError(f"unknown ablation {which!r}")
        pred = np.argmax(logits.data, axis=-1)
        return float((pred == labels).mean())

    def _kept_frames_encoded(self, frames: Tensor) -> Tensor:
        if self.config.keyframe:
            pi = self.keyframe.keep_probabilities(frames)
            decision = sample_decision(pi, mode="eval")
            frames = apply_decision(frames, decision)
        return self.enc_video(frames)

    def _complement_fused(self, h: Tensor, state: MaskState) -> Tensor:
        complement = Tensor(state.magnitude.data * (1.0 - probabilities(state)))
        return token_fuse(h * complement, complement)

    # ---------------------------------------------------------------- diagnostics

    def mask_supports(self) -> dict[str, np.ndarray]:
        return {"text": support(self.mask_text), "video": support(self.mask_video)}

    def masked_feature_matrix(
        self, samples: Sequence[Sample], modality: str, raw: bool = False
    ) -> np.ndarray:
        """Per-sample feature rows for independence tests: the token mean of
        the masked encoder output (or of the raw encoder output)."""
        text, video, _ = stack_samples(samples)
        with no_grad():
            if modality == "text":
                h = self.enc_text(Tensor(text))
                state = self.mask_text
            elif modality == "video":
                h = self._kept_frames_encoded(Tensor(video))
                state = self.mask_video
            else:
                raise ValueError(f"unknown modality {modality!r}")
            if not raw:
                h = masked_features(h, state).x_c
        return h.data.mean(axis=-2)

    def keyframe_decisions(self, samples: Sequence[Sample]) -> np.ndarray:
        """Eval-mode keep decisions per sample and frame (all ones when the
        selector is disabled)."""
        _, video, _ = stack_samples(samples)
        if not self.config.keyframe:
            return np.ones(video.shape[:2])
        with no_grad():
            pi = self.keyframe.keep_probabilities(Tensor(video))
            decision = sample_decision(pi, mode="eval")
        return decision.data.copy()


def train_model(
    config: ModelConfig, samples: Sequence[Sample]
) -> tuple[SequenceClassifier, list[StageReport]]:
    model = SequenceClassifier(config)
    reports = model.train(samples)
    return model, reports
