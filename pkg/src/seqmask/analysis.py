"""Feature-level statistics for trained masks.

Fisher's z transform of the Pearson correlation gives an independence test:
z = atanh(r) * sqrt(n - 3) is approximately standard normal under the null,
so |z| beyond the two-sided normal quantile rejects independence. Reports
aggregate pairwise tests within/between modalities, correlation with
ordinally-encoded labels, overlap of mask supports across runs, and
per-feature evidence contributions to classifier logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class FisherResult:
    r: float
    z: float
    critical: float
    dependent: bool


def fisher_z(x, y, level: float = 0.05) -> FisherResult:
    """Test two paired feature columns for (linear) independence.

    Raises on constant inputs and on n < 4, where the statistic is undefined.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"paired samples differ in length: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n < 4:
        raise ValueError(f"need at least 4 paired observations, got {n}")
    if x.std() == 0.0 or y.std() == 0.0:
        raise ValueError("correlation of a constant vector is undefined")
    r = float(np.corrcoef(x, y)[0, 1])
    with np.errstate(divide="ignore"):
        z = float(np.arctanh(min(1.0, max(-1.0, r))) * np.sqrt(n - 3))
    critical = float(stats.norm.ppf(1.0 - level / 2.0))
    return FisherResult(r=r, z=z, critical=critical, dependent=abs(z) > critical)


@dataclass
class IndependenceReport:
    level: float
    n: int
    pairs_tested: int = 0
    dependent_pairs: int = 0
    per_feature: dict[int, list[int]] = field(default_factory=dict)

    def _count(self, feature: int, dependent: bool) -> None:
        bucket = self.per_feature.setdefault(feature, [0, 0])
        bucket[1 if dependent else 0] += 1
        self.pairs_tested += 1
        self.dependent_pairs += int(dependent)

    @property
    def dependent_ratio(self) -> float | None:
        if self.pairs_tested == 0:
            return None
        return self.dependent_pairs / self.pairs_tested

    @property
    def independent_ratio(self) -> float | None:
        ratio = self.dependent_ratio
        return None if ratio is None else 1.0 - ratio


def cross_modal_independence(
    feats_a: np.ndarray,
    feats_b: np.ndarray,
    support_a: Sequence[int],
    support_b: Sequence[int],
    level: float = 0.05,
) -> IndependenceReport:
    """Pairwise tests between the selected features of two modalities.

    Per-feature counts are keyed by the first modality's feature indices.
    """
    feats_a, feats_b = np.asarray(feats_a), np.asarray(feats_b)
    if feats_a.shape[0] != feats_b.shape[0]:
        raise ValueError("modalities carry different sample counts")
    report = IndependenceReport(level=level, n=feats_a.shape[0])
    for i in support_a:
        for j in support_b:
            res = fisher_z(feats_a[:, i], feats_b[:, j], level=level)
            report._count(int(i), res.dependent)
    return report


def intra_modal_independence(
    feats: np.ndarray, support: Sequence[int], level: float = 0.05
) -> IndependenceReport:
    """Pairwise tests between distinct selected features of one modality."""
    feats = np.asarray(feats)
    report = IndependenceReport(level=level, n=feats.shape[0])
    support = list(support)
    for a in range(len(support)):
        for b in range(a + 1, len(support)):
            i, j = support[a], support[b]
            res = fisher_z(feats[:, i], feats[:, j], level=level)
            report._count(int(i), res.dependent)
            report._count(int(j), res.dependent)
    return report


def ordinal_encoding(labels, classes: int = 3) -> np.ndarray:
    """Center integer class labels: 3 classes map to {-1, 0, +1}."""
    return np.asarray(labels, dtype=np.float64) - (classes - 1) / 2.0


@dataclass
class LabelCorrelationReport:
    level: float
    n: int
    dependent: list[bool]
    selected_dependent_ratio: float | None
    removed_dependent_ratio: float | None


def label_correlation(
    feats: np.ndarray,
    labels,
    support: Sequence[int],
    level: float = 0.05,
    one_vs_rest: bool = False,
    classes: int = 3,
) -> LabelCorrelationReport:
    """Per-feature label-dependence flags plus selected/removed ratios.

    Default encoding is ordinal; ``one_vs_rest`` instead runs one binary
    test per class (no multiple-comparison correction) and flags a feature
    if any class rejects. Constant feature columns carry no label
    information and are counted as independent rather than raising.
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    flags: list[bool] = []
    for col in range(feats.shape[1]):
        column = feats[:, col]
        if column.std() == 0.0:
            flags.append(False)
            continue
        if one_vs_rest:
            dep = False
            for k in range(classes):
                enc = np.where(labels == k, 1.0, -1.0)
                dep = dep or fisher_z(column, enc, level=level).dependent
            flags.append(dep)
        else:
            enc = ordinal_encoding(labels, classes=classes)
            flags.append(fisher_z(column, enc, level=level).dependent)

    selected = set(int(i) for i in support)
    removed = [i for i in range(feats.shape[1]) if i not in selected]
    sel_flags = [flags[i] for i in sorted(selected)]
    rem_flags = [flags[i] for i in removed]
    return LabelCorrelationReport(
        level=level,
        n=feats.shape[0],
        dependent=flags,
        selected_dependent_ratio=(np.mean(sel_flags) if sel_flags else None),
        removed_dependent_ratio=(np.mean(rem_flags) if rem_flags else None),
    )


@dataclass
class OverlapReport:
    names: list[str]
    jaccard: np.ndarray
    consistent: list[int]


def invariant_overlap(supports: Mapping[str, Sequence[int]]) -> OverlapReport:
    """Pairwise Jaccard overlap of mask supports plus their intersection.

    Two empty supports are identical, so their overlap is defined as 1.0.
    """
    names = list(supports)
    sets = [set(int(i) for i in supports[name]) for name in names]
    k = len(names)
    jac = np.ones((k, k))
    for a in range(k):
        for b in range(k):
            union = sets[a] | sets[b]
            jac[a, b] = 1.0 if not union else len(sets[a] & sets[b]) / len(union)
    consistent = sorted(set.intersection(*sets)) if sets else []
    return OverlapReport(names=names, jaccard=jac, consistent=consistent)


@dataclass(frozen=True)
class RecoveryScore:
    precision: float
    recall: float
    invariant_retention: float
    spurious_retention: float


def recovery_score(
    selected: Sequence[int],
    invariant: Sequence[int],
    spurious: Sequence[int],
) -> RecoveryScore:
    """Score a mask support against generator ground truth.

    Precision of an empty selection is defined as 0.0; retention rates are
    the retained fractions of the respective true sets.
    """
    sel = set(int(i) for i in selected)
    inv = set(int(i) for i in invariant)
    spu = set(int(i) for i in spurious)
    precision = len(sel & inv) / len(sel) if sel else 0.0
    recall = len(sel & inv) / len(inv) if inv else 0.0
    return RecoveryScore(
        precision=precision,
        recall=recall,
        invariant_retention=recall,
        spurious_retention=(len(sel & spu) / len(spu) if spu else 0.0),
    )


def evidence_matrix(
    weights: np.ndarray, x: np.ndarray, mask: np.ndarray | None = None
) -> np.ndarray:
    """Per-feature, per-class evidence R[j, k] = W[j, k] * x_j (* m_j).

    Column sums equal the classifier logits minus its bias.
    """
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    if weights.shape[0] != x.shape[0]:
        raise ValueError(
            f"weight rows {weights.shape[0]} do not match feature width {x.shape[0]}"
        )
    scaled = x if mask is None else x * np.asarray(mask, dtype=np.float64).ravel()
    return weights * scaled[:, None]
