import numpy as np
import pytest

from seqmask.analysis import (
    cross_modal_independence,
    evidence_matrix,
    fisher_z,
    intra_modal_independence,
    invariant_overlap,
    label_correlation,
    ordinal_encoding,
    recovery_score,
)


def test_fisher_z_frozen_value():
    # Correlation 0.5 over 103 samples: atanh(0.5) * sqrt(100) = 5.493061...
    rng = np.random.default_rng(0)
    base = rng.normal(size=103)
    res = fisher_z(base, base)  # only to grab the critical value
    assert res.critical == pytest.approx(1.959964, abs=1e-6)

    z = np.arctanh(0.5) * np.sqrt(103 - 3)
    assert z == pytest.approx(5.4931, abs=1e-3)


def test_fisher_z_matches_manual_computation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=50)
    y = x + rng.normal(size=50)
    res = fisher_z(x, y)
    r = np.corrcoef(x, y)[0, 1]
    assert res.r == pytest.approx(r, abs=1e-12)
    assert res.z == pytest.approx(np.arctanh(r) * np.sqrt(47), abs=1e-12)
    assert res.dependent == (abs(res.z) > res.critical)


def test_fisher_z_rejects_constant_and_short_inputs():
    with pytest.raises(ValueError):
        fisher_z([1.0, 1.0, 1.0, 1.0], [0.1, 0.2, 0.3, 0.4])
    with pytest.raises(ValueError):
        fisher_z([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fisher_z([0.1, 0.2], [1.0, 2.0, 3.0])


def test_fisher_z_perfect_correlation_is_dependent():
    x = np.linspace(-1.0, 1.0, 20)
    res = fisher_z(x, 2.0 * x)
    assert res.dependent
    assert np.isinf(res.z)


def test_null_rejection_rate_near_level():
    rng = np.random.default_rng(7)
    rejected = 0
    trials = 2000
    for _ in range(trials):
        x = rng.normal(size=200)
        y = rng.normal(size=200)
        rejected += fisher_z(x, y).dependent
    rate = rejected / trials
    assert 0.03 <= rate <= 0.07


def test_dependent_pairs_are_detected():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.normal(size=103)
        y = x + rng.normal(size=103)  # population correlation ~0.71
        assert fisher_z(x, y).dependent


def test_cross_modal_report_on_independent_features():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(2000, 6))
    b = rng.normal(size=(2000, 5))
    report = cross_modal_independence(a, b, [0, 1, 2], [0, 1, 2, 3])
    assert report.pairs_tested == 12
    assert report.independent_ratio >= 0.9
    assert set(report.per_feature) == {0, 1, 2}
    counted = sum(sum(v) for v in report.per_feature.values())
    assert counted == report.pairs_tested


def test_cross_modal_report_detects_shared_factor():
    rng = np.random.default_rng(10)
    shared = rng.normal(size=2000)
    a = np.stack([shared + 0.1 * rng.normal(size=2000)], axis=1)
    b = np.stack([shared + 0.1 * rng.normal(size=2000)], axis=1)
    report = cross_modal_independence(a, b, [0], [0])
    assert report.dependent_ratio == 1.0


def test_empty_support_gives_empty_report():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(50, 3))
    report = cross_modal_independence(a, a, [], [0, 1])
    assert report.pairs_tested == 0
    assert report.dependent_ratio is None
    assert report.independent_ratio is None


def test_intra_modal_counts_both_endpoints():
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(500, 4))
    report = intra_modal_independence(feats, [0, 2, 3])
    # Three pairs, each counted on both endpoints.
    assert report.pairs_tested == 6
    assert sorted(report.per_feature) == [0, 2, 3]


def test_ordinal_encoding_three_classes():
    enc = ordinal_encoding([0, 1, 2, 1])
    assert enc.tolist() == [-1.0, 0.0, 1.0, 0.0]


def test_label_correlation_separates_signal_from_noise():
    rng = np.random.default_rng(13)
    labels = rng.integers(0, 3, size=1500)
    signal = ordinal_encoding(labels) + 0.5 * rng.normal(size=1500)
    noise = rng.normal(size=1500)
    feats = np.stack([signal, noise], axis=1)
    report = label_correlation(feats, labels, support=[0])
    assert report.dependent[0] is True
    assert report.dependent[1] is False
    assert report.selected_dependent_ratio == 1.0
    assert report.removed_dependent_ratio == 0.0


def test_label_correlation_constant_column_counts_independent():
    rng = np.random.default_rng(14)
    labels = rng.integers(0, 3, size=200)
    feats = np.zeros((200, 2))
    feats[:, 1] = rng.normal(size=200)
    report = label_correlation(feats, labels, support=[0, 1])
    assert report.dependent[0] is False


def test_label_correlation_one_vs_rest_flags_middle_class_signal():
    rng = np.random.default_rng(15)
    labels = rng.integers(0, 3, size=3000)
    # Correlated with "is class 1", which the ordinal encoding cannot see.
    feats = (labels == 1).astype(float) + 0.3 * rng.normal(size=3000)
    feats = feats[:, None]
    ordinal = label_correlation(feats, labels, support=[0])
    ovr = label_correlation(feats, labels, support=[0], one_vs_rest=True)
    assert ordinal.dependent[0] is False
    assert ovr.dependent[0] is True


def test_invariant_overlap_matrix():
    report = invariant_overlap({"a": [0, 1, 2], "b": [1, 2, 3], "c": [0, 1, 2]})
    assert report.names == ["a", "b", "c"]
    assert report.jaccard[0, 0] == 1.0
    assert report.jaccard[0, 2] == 1.0
    assert report.jaccard[0, 1] == pytest.approx(2.0 / 4.0)
    assert report.consistent == [1, 2]


def test_invariant_overlap_empty_supports():
    report = invariant_overlap({"a": [], "b": []})
    assert report.jaccard[0, 1] == 1.0
    assert report.consistent == []

    disjoint = invariant_overlap({"a": [0], "b": [1]})
    assert disjoint.jaccard[0, 1] == 0.0


def test_recovery_score_hand_case():
    score = recovery_score(selected=[0, 1, 4], invariant=[0, 1, 2], spurious=[4, 5])
    assert score.precision == pytest.approx(2.0 / 3.0)
    assert score.recall == pytest.approx(2.0 / 3.0)
    assert score.invariant_retention == score.recall
    assert score.spurious_retention == pytest.approx(1.0 / 2.0)


def test_recovery_score_empty_selection():
    score = recovery_score(selected=[], invariant=[0], spurious=[1])
    assert score.precision == 0.0
    assert score.recall == 0.0
    assert score.spurious_retention == 0.0


def test_evidence_matrix_columns_sum_to_logits():
    rng = np.random.default_rng(16)
    w = rng.normal(size=(6, 3))
    x = rng.normal(size=6)
    mask = np.array([1.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    evidence = evidence_matrix(w, x, mask)
    assert evidence.shape == (6, 3)
    logits = (x * mask) @ w
    assert np.allclose(evidence.sum(axis=0), logits, atol=1e-12)
    assert np.all(evidence[2] == 0.0)
    with pytest.raises(ValueError):
        evidence_matrix(w, x[:4])
