"""Delimited reports and their companion figures.

Every report path writes machine-readable CSV first and a rendered PNG
next to it: evaluation emits the per-fold metric table plus metric and
training-curve figures; study export emits decision/survey/accuracy tables
plus condition-level accuracy and workload figures.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

AGGREGATE_COLUMNS = ["fold", "held_out", "accuracy", "precision", "recall", "f1", "auc", "coverage"]


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def write_aggregate_csv(path: Path, cv_result) -> Path:
    """Per-fold metric rows plus mean/std rows, Table-style columns."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_COLUMNS)
        for fold in cv_result.folds:
            r = fold.report
            writer.writerow(
                [
                    fold.fold_index,
                    fold.held_out,
                    _fmt(r.accuracy),
                    _fmt(r.precision),
                    _fmt(r.recall),
                    _fmt(r.f1),
                    _fmt(r.auc),
                    _fmt(fold.coverage),
                ]
            )
        agg = cv_result.aggregate
        for stat in ("mean", "std"):
            writer.writerow(
                [stat, ""]
                + [_fmt(agg[m][stat]) for m in ("accuracy", "precision", "recall", "f1", "auc")]
                + [_fmt(agg["coverage"][stat])]
            )
    return path


def plot_fold_metrics(path: Path, cv_result) -> Path:
    metrics = ("accuracy", "precision", "recall", "f1", "auc")
    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(metrics))
    means = [cv_result.aggregate[m]["mean"] for m in metrics]
    stds = [cv_result.aggregate[m]["std"] for m in metrics]
    heights = [m if m is not None else 0.0 for m in means]
    errors = [s if s is not None else 0.0 for s in stds]
    ax.bar(x, heights, yerr=errors, capsize=4, color="#4878a8")
    for i, mean in enumerate(means):
        if mean is None:
            ax.text(i, 0.02, "undefined", ha="center", rotation=90, fontsize=8)
    ax.set_xticks(list(x))
    ax.set_xticklabels([m.upper() if m == "auc" else m.capitalize() for m in metrics])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Score (mean over folds, +/- std)")
    ax.set_title("Verifier performance, leave-one-subject-out")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_training_curves(path: Path, histories: dict[str, list]) -> Path:
    """``histories`` maps fold label -> list of EpochStats."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for label, history in histories.items():
        epochs = [h.epoch for h in history]
        ax_loss.plot(epochs, [h.train_loss for h in history], alpha=0.6, label=f"{label} train")
        ax_loss.plot(epochs, [h.val_loss for h in history], "--", alpha=0.8, label=f"{label} val")
        ax_acc.plot(epochs, [h.val_accuracy for h in history], alpha=0.8, label=label)
    ax_loss.set_xlabel("Epoch")
    ax_loss.set_ylabel("BCE loss")
    ax_loss.set_title("Losses")
    ax_loss.legend(fontsize=7)
    ax_acc.set_xlabel("Epoch")
    ax_acc.set_ylabel("Validation accuracy")
    ax_acc.set_ylim(0, 1.05)
    ax_acc.set_title("Held-in validation accuracy")
    ax_acc.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_condition_accuracy(path: Path, per_condition: dict[str, float | None]) -> Path:
    """Bar chart of prevalence-weighted accuracy per study condition."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(per_condition)
    values = [per_condition[n] if per_condition[n] is not None else 0.0 for n in names]
    ax.bar(range(len(names)), values, color="#70a070")
    for i, name in enumerate(names):
        if per_condition[name] is None:
            ax.text(i, 0.02, "no data", ha="center", rotation=90, fontsize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Prevalence-weighted accuracy")
    ax.set_title("Review accuracy by condition")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_tlx_boxes(path: Path, per_condition_scales: dict[str, dict[str, list[int]]]) -> Path:
    """Box plots of the six workload scales, one panel per scale.

    ``per_condition_scales`` maps condition -> scale name -> raw scores.
    """
    scales = sorted({s for cond in per_condition_scales.values() for s in cond})
    if not scales:
        scales = ["mental", "physical", "temporal", "performance", "effort", "frustration"]
    conditions = list(per_condition_scales)
    fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharey=True)
    for ax, scale in zip(axes.ravel(), scales[:6]):
        data = [per_condition_scales[c].get(scale, []) for c in conditions]
        if any(data):
            ax.boxplot([d if d else [0] for d in data], tick_labels=conditions)
        ax.set_title(scale)
        ax.tick_params(axis="x", labelrotation=30, labelsize=7)
    axes[0, 0].set_ylabel("Score (0-100)")
    fig.suptitle("Perceived workload by condition")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)
