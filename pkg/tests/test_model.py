"""Staged classifier: config validation, stage wiring, frozen-path checks,
loss decomposition, warm-up schedule, determinism, failure reporting."""

import numpy as np
import pytest

from seqmask.model import (
    ModelConfig,
    NumericalInstability,
    SequenceClassifier,
    accuracy_by_domain,
    stack_samples,
    train_model,
)
from seqmask.synthgen import Sample
from seqmask.tensor import Tensor


def tiny_config(**overrides):
    base = dict(
        d_text=8,
        d_video=8,
        tokens_text=2,
        frames_video=3,
        heads=2,
        keyframe_k=1,
        epochs=4,
        batch_size=8,
        lr=1e-3,
        warmup_epochs=0,
        alpha=1e-2,
        alpha_warmup_epochs=0,
        val_fraction=0.2,
        seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_samples(n=48, d=8, tokens=2, frames=3, signal=3.0, seed=0, domain="src"):
    """Balanced three-class samples whose first feature carries the label."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = i % 3
        text = rng.normal(size=(tokens, d))
        video = rng.normal(size=(frames, d))
        text[:, 0] += signal * (label - 1)
        video[:, 0] += signal * (label - 1)
        samples.append(Sample(f"{domain}-{i}", domain, label, text, video))
    return samples


class TestConfigValidation:
    def test_rejects_unknown_order(self):
        with pytest.raises(ValueError, match="order"):
            tiny_config(order="sideways")

    def test_rejects_negative_epochs(self):
        with pytest.raises(ValueError):
            tiny_config(epochs=-1)

    def test_rejects_bad_val_fraction(self):
        with pytest.raises(ValueError, match="val_fraction"):
            tiny_config(val_fraction=1.0)

    def test_rejects_negative_alpha(self):
        with pytest.raises(ValueError, match="alpha"):
            tiny_config(alpha=-0.1)

    def test_rejects_zero_mask_lr_scale(self):
        with pytest.raises(ValueError, match="mask_lr_scale"):
            tiny_config(mask_lr_scale=0.0)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            tiny_config(classes=1)


class TestHelpers:
    def test_stack_samples_shapes(self):
        samples = toy_samples(n=5)
        text, video, labels = stack_samples(samples)
        assert text.shape == (5, 2, 8)
        assert video.shape == (5, 3, 8)
        assert labels.tolist() == [0, 1, 2, 0, 1]

    def test_stack_rejects_empty(self):
        with pytest.raises(ValueError):
            stack_samples([])

    def test_accuracy_by_domain_groups(self):
        preds = np.array([0, 1, 2, 2])
        labels = np.array([0, 1, 0, 2])
        domains = np.array(["a", "a", "b", "b"])
        acc = accuracy_by_domain(preds, labels, domains)
        assert acc == {"a": 1.0, "b": 0.5}


class TestStageWiring:
    def test_single_head_width_follows_order(self):
        t2v = SequenceClassifier(tiny_config(order="t2v", d_text=8, d_video=12))
        v2t = SequenceClassifier(tiny_config(order="v2t", d_text=8, d_video=12))
        assert t2v.head_single.weight.data.shape[0] == 8
        assert v2t.head_single.weight.data.shape[0] == 12
        assert t2v.head_pair.weight.data.shape[0] == 20

    def test_stage_plan_split(self):
        model = SequenceClassifier(tiny_config(order="t2v", epochs=7))
        plan = model._stage_plan()
        assert plan == [("text", "head_single", 3), ("video", "head_pair", 4)]
        joint = SequenceClassifier(tiny_config(order="joint", epochs=7))
        assert joint._stage_plan() == [("joint", "head_pair", 7)]

    def test_pair_concatenation_order(self):
        # A selector column summing the first block of the concatenation
        # must pick up whichever modality the order puts first.
        fused = {
            "text": Tensor(np.full((1, 8), 1.0)),
            "video": Tensor(np.full((1, 8), 2.0)),
        }
        for order, first_sum in (("t2v", 8.0), ("v2t", 16.0)):
            model = SequenceClassifier(tiny_config(order=order))
            model.head_pair.weight.data[:] = 0.0
            model.head_pair.bias.data[:] = 0.0
            model.head_pair.weight.data[:8, 0] = 1.0
            logits = model._pair_logits(fused)
            assert logits.data[0, 0] == pytest.approx(first_sum)

    def test_joint_stage_trains_both_heads(self):
        config = tiny_config(order="joint", epochs=2)
        model = SequenceClassifier(config)
        single_before = model.head_single.weight.data.copy()
        pair_before = model.head_pair.weight.data.copy()
        model.train(toy_samples())
        assert not np.array_equal(model.head_single.weight.data, single_before)
        assert not np.array_equal(model.head_pair.weight.data, pair_before)

    def test_pair_stage_leaves_single_head_untouched(self):
        config = tiny_config(order="t2v", epochs=2)
        model = SequenceClassifier(config)
        names = set(model._stage_parameters("video", "head_pair"))
        assert not any(n.startswith("head_single") for n in names)

    def test_video_stage_excludes_text_parameters(self):
        model = SequenceClassifier(tiny_config(order="t2v"))
        names = set(model._stage_parameters("video", "head_pair"))
        assert any(n.startswith("mask_video") for n in names)
        assert any(n.startswith("head_pair") for n in names)
        assert not any(n.startswith("mask_text") for n in names)
        assert not any(n.startswith("head_single") for n in names)

    def test_frozen_modality_gets_no_gradient_in_pair_stage(self):
        model = SequenceClassifier(tiny_config(order="t2v"))
        samples = toy_samples(n=6)
        text, video, labels = stack_samples(samples)
        rng = np.random.default_rng(0)
        loss, _, _ = model._stage_loss(
            "video",
            "head_pair",
            Tensor(text),
            Tensor(video),
            labels,
            rng,
            temperature=1.0,
            alpha=0.1,
        )
        loss.backward()
        assert model.mask_text.magnitude.grad is None
        assert model.mask_text.threshold.grad is None
        assert model.mask_video.magnitude.grad is not None

    def test_frozen_encoders_never_move(self):
        config = tiny_config(order="joint", train_encoders=False, epochs=2)
        model = SequenceClassifier(config)
        before = {
            name: p.data.copy()
            for name, p in model.named_parameters()
            if name.startswith(("enc_text", "enc_video"))
        }
        model.train(toy_samples())
        for name, p in model.named_parameters():
            if name in before:
                np.testing.assert_array_equal(p.data, before[name])


class TestLossAndMasking:
    def test_loss_recomposes_from_parts(self):
        model = SequenceClassifier(tiny_config(order="joint"))
        samples = toy_samples(n=6)
        text, video, labels = stack_samples(samples)
        rng = np.random.default_rng(1)
        loss, parts, preds = model._stage_loss(
            "joint",
            "head_pair",
            Tensor(text),
            Tensor(video),
            labels,
            rng,
            temperature=0.7,
            alpha=0.03,
        )
        total = parts["ce"] + 0.03 * parts["sparse"] + parts["recon"]
        assert float(loss.data) == pytest.approx(total, abs=1e-12)
        assert preds.shape == (6,)

    def test_dropped_coordinates_vanish_from_fused_vector(self):
        model = SequenceClassifier(tiny_config())
        keep = np.array([0, 3])
        model.mask_text.magnitude.data[:] = 0.0
        model.mask_text.magnitude.data[keep] = 0.5
        model.mask_text.threshold.data[:] = 0.1
        fused = model.fused_text(Tensor(np.random.default_rng(2).normal(size=(4, 2, 8))))
        dropped = np.setdiff1d(np.arange(8), keep)
        np.testing.assert_array_equal(fused.data[:, dropped], 0.0)
        assert np.abs(fused.data[:, keep]).min() > 0.0

    def test_zero_head_predicts_first_class(self):
        model = SequenceClassifier(tiny_config())
        model.head_pair.weight.data[:] = 0.0
        model.head_pair.bias.data[:] = 0.0
        preds = model.predict(toy_samples(n=9))
        np.testing.assert_array_equal(preds, 0)

    def test_zero_video_mask_leaves_text_only_predictor(self):
        model = SequenceClassifier(tiny_config())
        model.mask_video.magnitude.data[:] = 0.0
        model.mask_video.threshold.data[:] = 0.5
        samples_a = toy_samples(n=6, seed=1)
        samples_b = [
            Sample(s.id, s.domain, s.label, s.text, -3.0 * s.video + 1.0)
            for s in samples_a
        ]
        xt = Tensor(np.stack([s.text for s in samples_a]))
        logits_a = model._eval_pair_logits(
            xt, Tensor(np.stack([s.video for s in samples_a]))
        )
        logits_b = model._eval_pair_logits(
            xt, Tensor(np.stack([s.video for s in samples_b]))
        )
        np.testing.assert_allclose(logits_a.data, logits_b.data, atol=1e-12)

    def test_positive_logit_scaling_keeps_predictions(self):
        model = SequenceClassifier(tiny_config())
        samples = toy_samples(n=30)
        before = model.predict(samples)
        model.head_pair.weight.data *= 7.5
        model.head_pair.bias.data *= 7.5
        np.testing.assert_array_equal(model.predict(samples), before)


class TestTraining:
    def test_zero_epochs_returns_no_reports_and_moves_nothing(self):
        config = tiny_config(epochs=0)
        model = SequenceClassifier(config)
        before = {name: p.data.copy() for name, p in model.named_parameters()}
        reports = model.train(toy_samples())
        assert reports == []
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[name])

    def test_untrained_accuracy_near_chance(self):
        # Balanced labels independent of the predictions give expected
        # accuracy exactly 1/3 whatever the untrained predictor does.
        model = SequenceClassifier(tiny_config(seed=5))
        samples = toy_samples(n=10000, signal=0.0, seed=5)
        acc = model.accuracy(samples)
        assert acc == pytest.approx(1 / 3, abs=0.02)

    def test_report_shape_and_epoch_numbering(self):
        config = tiny_config(order="t2v", epochs=4, alpha_warmup_epochs=1)
        model = SequenceClassifier(config)
        reports = model.train(toy_samples())
        assert [r.stage for r in reports] == ["text", "video"]
        assert [r.head for r in reports] == ["head_single", "head_pair"]
        rows = [row for r in reports for row in r.epochs]
        assert [row.epoch for row in rows] == [0, 1, 2, 3]
        for row in rows:
            assert row.loss == pytest.approx(
                row.ce_loss + row.alpha * row.sparse_loss + row.recon_loss,
                abs=1e-9,
            )
            assert 0.0 <= row.retained_text <= 1.0
            assert set(row.train_accuracy) == {"src"}
        for report in reports:
            for indices in report.supports.values():
                assert indices == sorted(indices)
                assert all(0 <= i < 8 for i in indices)

    def test_alpha_warmup_schedule_per_stage(self):
        config = tiny_config(order="t2v", epochs=8, alpha=0.5, alpha_warmup_epochs=2)
        model = SequenceClassifier(config)
        reports = model.train(toy_samples())
        for report in reports:
            alphas = [row.alpha for row in report.epochs]
            assert alphas == [0.0, 0.0, 0.5, 0.5]

    def test_temperature_anneals_across_stages(self):
        config = tiny_config(order="t2v", epochs=6, temperature=1.0)
        model = SequenceClassifier(config)
        rows = [row for r in model.train(toy_samples()) for row in r.epochs]
        temps = [row.temperature for row in rows]
        assert temps[0] == pytest.approx(1.0)
        for a, b in zip(temps, temps[1:]):
            assert b <= a
        assert temps[-1] == pytest.approx(0.97**5, rel=1e-12)

    def test_training_is_deterministic(self):
        config = tiny_config(order="t2v", epochs=3)
        samples = toy_samples()
        model_a, reports_a = train_model(config, samples)
        model_b, reports_b = train_model(config, samples)
        for (name, pa), (_, pb) in zip(
            model_a.named_parameters(), model_b.named_parameters()
        ):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)
        assert reports_a == reports_b

    def test_learns_separable_toy_task(self):
        config = tiny_config(
            order="joint",
            epochs=40,
            batch_size=16,
            lr=1e-2,
            val_fraction=0.0,
            keyframe=False,
            alpha=0.0,
        )
        samples = toy_samples(n=90, signal=4.0)
        model, reports = train_model(config, samples)
        assert model.accuracy(samples) >= 0.95
        first, last = reports[0].epochs[0], reports[0].epochs[-1]
        assert last.ce_loss < first.ce_loss

    def test_non_finite_loss_raises_with_context(self):
        config = tiny_config(order="joint", epochs=1)
        model = SequenceClassifier(config)
        model.head_pair.weight.data[:] = np.nan
        with pytest.raises(NumericalInstability) as exc:
            model.train(toy_samples())
        assert exc.value.stage == "joint"
        assert exc.value.epoch == 0
        assert "lr" in str(exc.value)


class TestEvaluation:
    def test_evaluate_groups_by_domain(self):
        model = SequenceClassifier(tiny_config())
        groups = {
            "a": toy_samples(n=9, domain="a"),
            "b": toy_samples(n=9, domain="b", seed=3),
        }
        acc = model.evaluate(groups)
        assert set(acc) == {"a", "b"}
        for value in acc.values():
            assert 0.0 <= value <= 1.0

    def test_domain_accuracies_aggregate_to_pooled(self):
        model = SequenceClassifier(tiny_config())
        groups = {
            "a": toy_samples(n=9, domain="a"),
            "b": toy_samples(n=15, domain="b", seed=3),
        }
        acc = model.evaluate(groups)
        pooled = model.accuracy(groups["a"] + groups["b"])
        weighted = (9 * acc["a"] + 15 * acc["b"]) / 24
        assert pooled == pytest.approx(weighted, abs=1e-12)

    def test_ablation_modes_run_and_differ_from_error(self):
        model = SequenceClassifier(tiny_config())
        samples = toy_samples(n=12)
        for which in ("add_noise", "using_ds", "no_keyframe"):
            value = model.evaluate_ablation(samples, which)
            assert 0.0 <= value <= 1.0
        with pytest.raises(ValueError, match="ablation"):
            model.evaluate_ablation(samples, "upside_down")

    def test_add_noise_ablation_is_seeded(self):
        model = SequenceClassifier(tiny_config())
        samples = toy_samples(n=12)
        a = model.evaluate_ablation(samples, "add_noise")
        b = model.evaluate_ablation(samples, "add_noise")
        assert a == b

    def test_keyframe_decisions_shape_and_budget(self):
        config = tiny_config(keyframe_k=1)
        model = SequenceClassifier(config)
        samples = toy_samples(n=5)
        decisions = model.keyframe_decisions(samples)
        assert decisions.shape == (5, 3)
        assert set(np.unique(decisions)) <= {0.0, 1.0}

    def test_masked_feature_matrix_raw_toggle(self):
        model = SequenceClassifier(tiny_config())
        samples = toy_samples(n=4)
        masked = model.masked_feature_matrix(samples, "text")
        raw = model.masked_feature_matrix(samples, "text", raw=True)
        assert masked.shape == raw.shape == (4, 8)
        assert not np.allclose(masked, raw)
