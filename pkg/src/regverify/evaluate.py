"""Leave-one-subject-out evaluation: train, calibrate, score each fold.

Every fold holds out one specimen entirely.  Of the remaining specimens'
projections, a fraction is set aside for conformal calibration and the
rest is split again into training and early-stopping validation.  A
leakage check runs before any fold trains; overlapping sample keys abort
the run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, SampleRecord, load_training_samples
from .errors import DataLeakageError
from .explain import ConformalCalibration, calibrate, predict_set
from .geometry import RegistrationLabel
from .metrics import MetricReport, categorize, compute_metrics
from .model import ModelConfig, VerifierNet, predict_batch, save_checkpoint
from .training import (
    TrainConfig,
    TrainResult,
    loso_split,
    records_for_specimens,
    split_calibration_projections,
    train,
    write_history_csv,
)


def sample_key(rec: SampleRecord) -> str:
    return f"{rec.specimen_id}/{rec.projection_id}/{rec.sample_id}"


@dataclass(frozen=True)
class PredictionRow:
    key: str
    specimen_id: str
    probability_accept: float
    predicted: RegistrationLabel
    actual: RegistrationLabel
    category: str
    set_labels: tuple[str, ...]
    set_certain: bool
    set_fallback: bool

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "specimen_id": self.specimen_id,
            "probability_accept": self.probability_accept,
            "predicted": self.predicted.value,
            "actual": self.actual.value,
            "category": self.category,
            "set_labels": list(self.set_labels),
            "set_certain": self.set_certain,
            "set_fallback": self.set_fallback,
        }


@dataclass
class FoldResult:
    fold_index: int
    held_out: str
    report: MetricReport
    coverage: float
    predictions: list[PredictionRow]
    calibration: ConformalCalibration
    best_epoch: int


@dataclass
class CVResult:
    folds: list[FoldResult]
    aggregate: dict[str, dict[str, float | None]]  # metric -> {mean, std, n_defined}

    def to_dict(self) -> dict:
        return {
            "folds": [
                {
                    "fold_index": f.fold_index,
                    "held_out": f.held_out,
                    "report": f.report.to_dict(),
                    "coverage": f.coverage,
                    "best_epoch": f.best_epoch,
                }
                for f in self.folds
            ],
            "aggregate": self.aggregate,
        }


METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


def aggregate_reports(folds: list[FoldResult]) -> dict[str, dict[str, float | None]]:
    out: dict[str, dict[str, float | None]] = {}
    for name in METRIC_NAMES:
        values = [getattr(f.report, name) for f in folds]
        defined = [v for v in values if v is not None]
        if defined:
            out[name] = {
                "mean": float(np.mean(defined)),
                "std": float(np.std(defined)),
                "n_defined": len(defined),
            }
        else:
            out[name] = {"mean": None, "std": None, "n_defined": 0}
    coverages = [f.coverage for f in folds]
    out["coverage"] = {
        "mean": float(np.mean(coverages)),
        "std": float(np.std(coverages)),
        "n_defined": len(coverages),
    }
    return out


def check_fold_integrity(
    train_recs, cal_recs, test_recs, held_out: str
) -> None:
    """Abort on any specimen or sample-key overlap across the three splits."""
    train_keys = {sample_key(r) for r in train_recs}
    cal_keys = {sample_key(r) for r in cal_recs}
    test_keys = {sample_key(r) for r in test_recs}
    for a, b, names in (
        (train_keys, test_keys, "train/test"),
        (cal_keys, test_keys, "calibration/test"),
        (train_keys, cal_keys, "train/calibration"),
    ):
        overlap = a & b
        if overlap:
            raise DataLeakageError(f"{names} overlap: {sorted(overlap)[:5]}")
    for rec in (*train_recs, *cal_recs):
        if rec.specimen_id == held_out:
            raise DataLeakageError(
                f"held-out specimen {held_out} found in a training-side split: "
                f"{sample_key(rec)}"
            )


def _predict_records(
    model: VerifierNet, manifest: DatasetManifest, records
) -> list:
    samples = load_training_samples(manifest, records)
    return predict_batch(model, [s.pair for s in samples])


def run_fold(
    manifest: DatasetManifest,
    fold_index: int,
    train_specimens: list[str],
    held_out: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    alpha: float = 0.1,
    calibration_fraction: float = 0.2,
    val_fraction: float = 0.15,
    out_dir: Path | None = None,
) -> FoldResult:
    rng = np.random.default_rng([train_cfg.seed, fold_index])
    fit_recs, cal_recs = split_calibration_projections(
        manifest, train_specimens, calibration_fraction, rng
    )
    # Carve early-stopping validation out of the fit split, by projection,
    # so calibration data never influences model selection.
    projections = sorted({(r.specimen_id, r.projection_id) for r in fit_recs})
    n_val = max(1, int(round(len(projections) * val_fraction)))
    val_set = {projections[i] for i in rng.choice(len(projections), n_val, replace=False)}
    train_recs = tuple(
        r for r in fit_recs if (r.specimen_id, r.projection_id) not in val_set
    )
    val_recs = tuple(r for r in fit_recs if (r.specimen_id, r.projection_id) in val_set)
    test_recs = records_for_specimens(manifest, [held_out])
    check_fold_integrity(train_recs, cal_recs, test_recs, held_out)

    result: TrainResult = train(
        load_training_samples(manifest, train_recs),
        load_training_samples(manifest, val_recs),
        model_cfg,
        train_cfg,
    )
    model = result.model

    cal_outputs = _predict_records(model, manifest, cal_recs)
    calibration = calibrate(
        [o.probability_pair for o in cal_outputs],
        [r.label for r in cal_recs],
        alpha,
        calibration_ids=[sample_key(r) for r in cal_recs],
        train_ids={sample_key(r) for r in train_recs},
    )

    test_outputs = _predict_records(model, manifest, test_recs)
    rows: list[PredictionRow] = []
    covered = 0
    for rec, out in zip(test_recs, test_outputs):
        pset = predict_set(out.probability_pair, calibration)
        covered += rec.label in pset.labels
        rows.append(
            PredictionRow(
                key=sample_key(rec),
                specimen_id=rec.specimen_id,
                probability_accept=out.probability_accept,
                predicted=out.predicted_label,
                actual=rec.label,
                category=categorize(out.predicted_label, rec.label).value,
                set_labels=tuple(l.value for l in pset.labels),
                set_certain=pset.certain,
                set_fallback=pset.fallback,
            )
        )
    report = compute_metrics(
        [r.predicted for r in rows],
        [r.actual for r in rows],
        [r.probability_accept for r in rows],
    )
    fold = FoldResult(
        fold_index=fold_index,
        held_out=held_out,
        report=report,
        coverage=covered / len(rows),
        predictions=rows,
        calibration=calibration,
        best_epoch=result.best_epoch,
    )
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold{fold_index}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            fold_dir / "ckpt.pt",
            model,
            train_specimens=train_specimens,
            extra={"held_out": held_out, "fold_index": fold_index},
        )
        calibration.save(fold_dir / "calibration.json")
        write_history_csv(fold_dir / "history.csv", result.history)
        (fold_dir / "predictions.json").write_text(
            json.dumps([r.to_dict() for r in rows], indent=1)
        )
        (fold_dir / "report.json").write_text(
            json.dumps(
                {
                    "held_out": held_out,
                    "coverage": fold.coverage,
                    "best_epoch": result.best_epoch,
                    **report.to_dict(),
                },
                indent=1,
            )
        )
    return fold


def run_cv(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    alpha: float = 0.1,
    out_dir: Path | None = None,
    calibration_fraction: float = 0.2,
) -> CVResult:
    folds = []
    for index, (train_specimens, held_out) in enumerate(loso_split(manifest)):
        folds.append(
            run_fold(
                manifest,
                index,
                train_specimens,
                held_out,
                model_cfg,
                train_cfg,
                alpha=alpha,
                calibration_fraction=calibration_fraction,
                out_dir=out_dir,
            )
        )
    result = CVResult(folds=folds, aggregate=aggregate_reports(folds))
    if out_dir is not None:
        (Path(out_dir) / "cv_result.json").write_text(json.dumps(result.to_dict(), indent=1))
    return result
