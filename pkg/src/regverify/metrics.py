"""Classification metrics, balanced error-category subsets, and
prevalence-weighted accuracy.

The positive class is ACCEPT throughout: accepting a bad registration is
the safety-relevant false positive.  Metrics whose denominator vanishes
are reported as ``None`` rather than a silent zero so aggregation can
exclude them explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError, ShortageError
from .geometry import RegistrationLabel

# Error-category prevalences reported for the full test set, used to weight
# per-category accuracies into a deployment estimate.  They are quoted
# percentages and deliberately kept verbatim (they sum to 0.999).
PREVALENCE_WEIGHTS = {"tp": 0.226, "tn": 0.534, "fp": 0.188, "fn": 0.051}


class Category(str, Enum):
    TP = "tp"
    TN = "tn"
    FP = "fp"
    FN = "fn"


def categorize(
    predicted: RegistrationLabel, actual: RegistrationLabel
) -> Category:
    if predicted is RegistrationLabel.ACCEPT:
        return Category.TP if actual is RegistrationLabel.ACCEPT else Category.FP
    return Category.FN if actual is RegistrationLabel.ACCEPT else Category.TN


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InvalidInputError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, predictions, labels) -> "ConfusionCounts":
        counts = {c: 0 for c in Category}
        for pred, actual in zip(predictions, labels, strict=True):
            counts[categorize(pred, actual)] += 1
        return cls(
            tp=counts[Category.TP],
            tn=counts[Category.TN],
            fp=counts[Category.FP],
            fn=counts[Category.FN],
        )


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    auc: float | None
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "counts": {
                "tp": self.counts.tp,
                "tn": self.counts.tn,
                "fp": self.counts.fp,
                "fn": self.counts.fn,
            },
        }


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC from midranks; ties count half.

    ``labels`` are RegistrationLabel or booleans (True = ACCEPT).  Returns
    None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.array(
        [l is RegistrationLabel.ACCEPT if isinstance(l, RegistrationLabel) else bool(l)
         for l in labels]
    )
    if scores.shape[0] != positive.shape[0] or scores.shape[0] == 0:
        raise InvalidInputError("scores and labels must be equal-length and non-empty")
    n_pos = int(positive.sum())
    n_neg = int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # midranks
    rank_sum = float(ranks[positive].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def metrics_from_counts(counts: ConfusionCounts, auc_value: float | None = None) -> MetricReport:
    if counts.total == 0:
        raise InvalidInputError("cannot compute metrics on zero samples")
    accuracy = (counts.tp + counts.tn) / counts.total
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else None
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    elif precision == 0.0 and recall == 0.0:
        f1 = 0.0
    else:
        f1 = None
    return MetricReport(accuracy, precision, recall, f1, auc_value, counts)


def compute_metrics(predictions, labels, scores=None) -> MetricReport:
    """All standard metrics from hard predictions, true labels, and optional
    continuous scores (needed for AUC)."""
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels) or not predictions:
        raise InvalidInputError("predictions and labels must be equal-length, non-empty")
    counts = ConfusionCounts.from_predictions(predictions, labels)
    auc_value = auc(scores, labels) if scores is not None else None
    return metrics_from_counts(counts, auc_value)


def balanced_subset(
    categories: dict[str, "Category"],
    n_per_category: int,
    rng: np.random.Generator,
) -> list[str]:
    """Sample ids, exactly ``n_per_category`` from each error category.

    ``categories`` maps sample id -> Category.  Draws without replacement,
    deterministic for a given rng state; ids are returned grouped by
    category in the fixed order TP, TN, FP, FN.
    """
    if n_per_category < 1:
        raise InvalidInputError("n_per_category must be >= 1")
    by_category: dict[Category, list[str]] = {c: [] for c in Category}
    for sample_id in sorted(categories):
        by_category[categories[sample_id]].append(sample_id)
    chosen: list[str] = []
    for cat in (Category.TP, Category.TN, Category.FP, Category.FN):
        pool = by_category[cat]
        if len(pool) < n_per_category:
            raise ShortageError(cat.value, n_per_category, len(pool))
        picks = rng.choice(len(pool), size=n_per_category, replace=False)
        chosen.extend(pool[i] for i in sorted(picks))
    return chosen


def weighted_accuracy(
    fraction_correct: dict[str, float], weights: dict[str, float] | None = None
) -> float:
    """Sum of per-category fraction-correct times category prevalence.

    ``fraction_correct`` and ``weights`` are keyed by 'tp'/'tn'/'fp'/'fn'.
    Weights default to the reported test-set prevalences and are used
    verbatim (no renormalization).
    """
    if weights is None:
        weights = PREVALENCE_WEIGHTS
    keys = {"tp", "tn", "fp", "fn"}
    if set(weights) != keys or set(fraction_correct) != keys:
        raise InvalidInputError("need exactly the keys tp/tn/fp/fn")
    w = np.array([weights[k] for k in ("tp", "tn", "fp", "fn")])
    f = np.array([fraction_correct[k] for k in ("tp", "tn", "fp", "fn")])
    if np.any(w < 0) or abs(w.sum() - 1.0) > 2e-3:
        raise InvalidInputError("weights must be non-negative and sum to ~1")
    if np.any((f < 0) | (f > 1)):
        raise InvalidInputError("fractions must lie in [0, 1]")
    return float(np.dot(f, w))


def weighted_accuracy_observed(
    fraction_correct: dict[str, float | None],
    weights: dict[str, float] | None = None,
) -> float | None:
    """Weighted accuracy tolerating unobserved categories (fraction None).

    With every category observed this is exactly ``weighted_accuracy``;
    otherwise the weights are renormalized over the observed categories.
    Returns None when nothing was observed.
    """
    if weights is None:
        weights = PREVALENCE_WEIGHTS
    present = {k: v for k, v in fraction_correct.items() if v is not None}
    if not present:
        return None
    if len(present) == 4:
        return weighted_accuracy(dict(fraction_correct), weights)
    mass = sum(weights[k] for k in present)
    return float(sum(v * weights[k] for k, v in present.items()) / mass)
