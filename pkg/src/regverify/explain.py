"""Prediction explanations: Grad-CAM heatmaps and conformal prediction sets.

Grad-CAM hooks the last convolutional map in the backbone (pre-split):
gradients of the target-class score are averaged over space to weight the
feature channels, the weighted sum is ReLU'd, max-normalized, and
bilinearly upsampled to the input size.

Conformal prediction is the split variant: the nonconformity score of a
label is one minus its predicted probability, the calibration threshold is
the ceil((n+1)(1-alpha))-th smallest calibration score, and a test-time
prediction set contains every label whose score clears the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import ImagePair
from .errors import DataLeakageError, InvalidInputError, InvalidStateError
from .geometry import RegistrationLabel
from .model import VerifierNet, pair_to_tensor


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # native last-conv resolution, values in [0, 1]
    upsampled: np.ndarray  # input-image resolution, values in [0, 1]

    @property
    def native_dims(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def upsampled_dims(self) -> tuple[int, int]:
        return self.upsampled.shape


def weighted_cam(feature_map: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Spatial-mean gradient weights x feature maps, summed over channels, ReLU'd,
    then max-normalized when any activation survives."""
    weights = gradients.mean(axis=(1, 2))
    cam = np.tensordot(weights, feature_map, axes=([0], [0]))
    cam = np.maximum(cam, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


def _upsample_bilinear(grid: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(grid[None, None].astype(np.float32))
    up = F.interpolate(t, size=dims, mode="bilinear", align_corners=False)
    return up[0, 0].numpy().astype(np.float64)


def grad_cam(
    model: VerifierNet,
    pair: ImagePair,
    target: RegistrationLabel | None = None,
) -> Heatmap:
    """Class-discriminative heatmap for one input pair.

    ``target`` defaults to the model's predicted label.  The score whose
    gradient is taken is the logit for ACCEPT and its negation for REJECT.
    """
    for param in model.parameters():
        if not torch.all(torch.isfinite(param)):
            raise InvalidStateError("model parameters contain non-finite values")

    was_training = model.training
    model.eval()
    try:
        x = pair_to_tensor(pair).requires_grad_(False)
        captured: dict[str, torch.Tensor] = {}

        def hook(_module, _inputs, output):
            captured["map"] = output
            output.retain_grad()

        handle = model.blocks[-1].register_forward_hook(hook)
        try:
            logit = model(x)[0]
        finally:
            handle.remove()

        if target is None:
            target = (
                RegistrationLabel.ACCEPT
                if float(logit.item()) >= 0.0
                else RegistrationLabel.REJECT
            )
        score = logit if target is RegistrationLabel.ACCEPT else -logit
        model.zero_grad()
        score.backward()
        feature_map = captured["map"][0].detach().numpy()
        grads = captured["map"].grad[0].detach().numpy()
    finally:
        model.train(was_training)

    cam = weighted_cam(feature_map, grads)
    return Heatmap(grid=cam, upsampled=_upsample_bilinear(cam, pair.shape))


def nonconformity(
    probability_pair: tuple[float, float], label: RegistrationLabel
) -> float:
    """One minus the probability assigned to ``label``.

    ``probability_pair`` is (p_accept, p_reject).
    """
    p_accept, p_reject = probability_pair
    if not (math.isfinite(p_accept) and math.isfinite(p_reject)):
        raise InvalidInputError("probabilities must be finite")
    if min(p_accept, p_reject) < 0 or abs(p_accept + p_reject - 1.0) > 1e-6:
        raise InvalidInputError(
            f"probabilities must be non-negative and sum to 1, got {probability_pair}"
        )
    p = p_accept if label is RegistrationLabel.ACCEPT else p_reject
    return 1.0 - p


def conformal_threshold(scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, clamped to the maximum."""
    scores = sorted(float(s) for s in scores)
    if not scores:
        raise InvalidInputError("need at least one calibration score")
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError("alpha must be in (0, 1)")
    n = len(scores)
    rank = math.ceil((n + 1) * (1.0 - alpha))
    rank = min(rank, n)
    return scores[rank - 1]


@dataclass(frozen=True)
class ConformalCalibration:
    alpha: float
    scores: tuple[float, ...]  # sorted ascending
    threshold: float

    @property
    def n(self) -> int:
        return len(self.scores)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "threshold": self.threshold,
            "n": self.n,
            "scores": list(self.scores),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalCalibration":
        return cls(d["alpha"], tuple(d["scores"]), d["threshold"])

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: Path) -> "ConformalCalibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


MIN_CALIBRATION_SIZE = 10


def calibrate_from_scores(scores, alpha: float = 0.1) -> ConformalCalibration:
    scores = tuple(sorted(float(s) for s in scores))
    if len(scores) < MIN_CALIBRATION_SIZE:
        raise InvalidInputError(
            f"calibration needs >= {MIN_CALIBRATION_SIZE} samples, got {len(scores)}"
        )
    if any(s < 0 or s > 1 for s in scores):
        raise InvalidInputError("nonconformity scores must lie in [0, 1]")
    return ConformalCalibration(alpha, scores, conformal_threshold(scores, alpha))


def calibrate(
    probability_pairs,
    labels,
    alpha: float = 0.1,
    calibration_ids=None,
    train_ids=None,
) -> ConformalCalibration:
    """Build a calibration from held-out predictions and their true labels.

    Refuses to proceed if any calibration sample id also appears in the
    training id set.
    """
    if train_ids is not None and calibration_ids is not None:
        overlap = set(calibration_ids) & set(train_ids)
        if overlap:
            raise DataLeakageError(
                f"calibration overlaps training set: {sorted(overlap)[:5]}"
            )
    scores = [nonconformity(pp, label) for pp, label in zip(probability_pairs, labels)]
    return calibrate_from_scores(scores, alpha)


@dataclass(frozen=True)
class PredictionSet:
    labels: tuple[RegistrationLabel, ...]
    scores: dict[RegistrationLabel, float]
    certain: bool  # singleton set
    fallback: bool  # no label cleared the threshold; best label returned anyway

    def to_dict(self) -> dict:
        return {
            "labels": [l.value for l in self.labels],
            "scores": {l.value: s for l, s in self.scores.items()},
            "certain": self.certain,
            "fallback": self.fallback,
        }


def predict_set(
    probability_pair: tuple[float, float], calibration: ConformalCalibration
) -> PredictionSet:
    """Labels whose nonconformity clears the calibrated threshold.

    Never empty: if both labels miss, the lowest-score label is returned
    flagged as a fallback (ties go to the model's preferred label).
    """
    scores = {
        label: nonconformity(probability_pair, label)
        for label in (RegistrationLabel.ACCEPT, RegistrationLabel.REJECT)
    }
    included = tuple(
        label
        for label in (RegistrationLabel.ACCEPT, RegistrationLabel.REJECT)
        if scores[label] <= calibration.threshold
    )
    fallback = not included
    if fallback:
        best = min(
            scores, key=lambda label: (scores[label], label is RegistrationLabel.REJECT)
        )
        included = (best,)
    return PredictionSet(
        labels=included,
        scores=scores,
        certain=len(included) == 1 and not fallback,
        fallback=fallback,
    )


def prediction_sets_for_pairs(
    model: VerifierNet, pairs, calibration: ConformalCalibration
) -> list[PredictionSet]:
    from .model import predict_batch

    outputs = predict_batch(model, list(pairs))
    return [predict_set(out.probability_pair, calibration) for out in outputs]
