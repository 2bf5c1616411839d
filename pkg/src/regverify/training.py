"""Training loop and leave-one-subject-out fold construction.

Training minimizes binary cross-entropy on logits with AdamW (decoupled
weight decay).  The training split alone gets projection filtering, accept
oversampling, and per-epoch pixel augmentation; validation images are used
as stored.  Everything is seeded: same seed, same loss curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dataset import (
    AugmentParams,
    DatasetManifest,
    SampleRecord,
    TrainingSample,
    augment_pair,
    filter_projections,
    load_training_samples,
    oversample_accepts,
)
from .errors import InvalidInputError, TrainingError
from .geometry import RegistrationLabel
from .model import ModelConfig, VerifierNet


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0002
    weight_decay: float = 0.00005
    batch_size: int = 16
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    oversample_target_ratio: float = 1.0
    augment: AugmentParams = field(default_factory=AugmentParams)
    train_time_augment: bool = True
    filter_rejected_fraction: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise InvalidInputError("learning rate and weight decay must be >= 0")
        if min(self.batch_size, self.epochs, self.patience) < 1:
            raise InvalidInputError("batch size, epochs, and patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "patience": self.patience,
            "seed": self.seed,
            "oversample_target_ratio": self.oversample_target_ratio,
            "train_time_augment": self.train_time_augment,
            "filter_rejected_fraction": self.filter_rejected_fraction,
        }


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: VerifierNet
    history: list[EpochStats]
    best_epoch: int


def _to_batch(samples: list[TrainingSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([np.stack([s.pair.xray, s.pair.drr]) for s in samples])
    labels = np.array(
        [1.0 if s.record.label is RegistrationLabel.ACCEPT else 0.0 for s in samples],
        dtype=np.float32,
    )
    return torch.from_numpy(images).float(), torch.from_numpy(labels)


def _evaluate_split(model: VerifierNet, samples, batch_size: int) -> tuple[float, float]:
    loss_fn = nn.BCEWithLogitsLoss(reduction="sum")
    model.eval()
    total_loss = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images, labels = _to_batch(chunk)
            logits = model(images)
            total_loss += float(loss_fn(logits, labels).item())
            predicted = (torch.sigmoid(logits) >= 0.5).float()
            correct += int((predicted == labels).sum().item())
    return total_loss / len(samples), correct / len(samples)


def train(
    train_samples: list[TrainingSample],
    val_samples: list[TrainingSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    apply_preprocessing: bool = True,
) -> TrainResult:
    """Train a verifier; returns the parameters from the best-val-loss epoch."""
    if not train_samples or not val_samples:
        raise InvalidInputError("both splits must be non-empty")

    rng = np.random.default_rng(train_cfg.seed)
    if apply_preprocessing:
        filtered = filter_projections(
            tuple(s.record for s in train_samples), train_cfg.filter_rejected_fraction
        )
        keep = {(r.specimen_id, r.projection_id, r.sample_id) for r in filtered}
        train_samples = [
            s
            for s in train_samples
            if (s.record.specimen_id, s.record.projection_id, s.record.sample_id) in keep
        ]
        train_samples = oversample_accepts(
            train_samples, rng, train_cfg.augment, train_cfg.oversample_target_ratio
        )

    labels = {s.record.label for s in train_samples}
    if len(labels) < 2:
        raise InvalidInputError("training split must contain both classes")

    torch.manual_seed(train_cfg.seed)
    model = VerifierNet(model_cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=train_cfg.learning_rate,
        weight_decay=train_cfg.weight_decay,
    )
    loss_fn = nn.BCEWithLogitsLoss()

    history: list[EpochStats] = []
    best_val = float("inf")
    best_epoch = -1
    best_state = None
    epochs_since_best = 0

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(train_samples))
        model.train()
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            if len(idx) < 2:
                continue  # batchnorm needs more than one sample
            chunk = [train_samples[i] for i in idx]
            if train_cfg.train_time_augment:
                chunk = [
                    TrainingSample(s.record, augment_pair(s.pair, rng, train_cfg.augment))
                    for s in chunk
                ]
            images, targets = _to_batch(chunk)
            optimizer.zero_grad()
            logits = model(images)
            loss = loss_fn(logits, targets)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.item())
            n_batches += 1

        val_loss, val_acc = _evaluate_split(model, val_samples, train_cfg.batch_size)
        history.append(
            EpochStats(epoch, epoch_loss / max(n_batches, 1), val_loss, val_acc)
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_cfg.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def loso_split(manifest: DatasetManifest) -> list[tuple[list[str], str]]:
    """One fold per specimen: (train specimen ids, held-out specimen id)."""
    specimens = manifest.specimen_ids()
    if len(specimens) < 2:
        raise InvalidInputError("leave-one-subject-out needs at least 2 specimens")
    return [
        ([s for s in specimens if s != held_out], held_out) for held_out in specimens
    ]


def records_for_specimens(
    manifest: DatasetManifest, specimen_ids: list[str]
) -> tuple[SampleRecord, ...]:
    wanted = set(specimen_ids)
    return tuple(r for r in manifest.samples if r.specimen_id in wanted)


def split_calibration_projections(
    manifest: DatasetManifest,
    train_specimens: list[str],
    calibration_fraction: float,
    rng: np.random.Generator,
) -> tuple[tuple[SampleRecord, ...], tuple[SampleRecord, ...]]:
    """Hold out a fraction of the training specimens' projections for calibration.

    The held-out projections never reach the training loop, keeping the
    conformal calibration set disjoint from everything the model saw.
    """
    records = records_for_specimens(manifest, train_specimens)
    projections = sorted({(r.specimen_id, r.projection_id) for r in records})
    n_cal = max(1, int(round(len(projections) * calibration_fraction)))
    chosen = rng.choice(len(projections), size=n_cal, replace=False)
    cal_projections = {projections[i] for i in chosen}
    train = tuple(
        r for r in records if (r.specimen_id, r.projection_id) not in cal_projections
    )
    cal = tuple(r for r in records if (r.specimen_id, r.projection_id) in cal_projections)
    return train, cal


def write_history_csv(path: Path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for row in history:
            writer.writerow([row.epoch, row.train_loss, row.val_loss, row.val_accuracy])


def load_fold_samples(
    manifest: DatasetManifest, records: tuple[SampleRecord, ...]
) -> list[TrainingSample]:
    return load_training_samples(manifest, records)
