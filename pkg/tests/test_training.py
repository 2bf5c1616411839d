import numpy as np
import pytest
import torch

from regverify.dataset import (
    AugmentParams,
    load_training_samples,
)
from regverify.errors import InvalidInputError, TrainingError
from regverify.geometry import RegistrationLabel
from regverify.model import ModelConfig
from regverify.training import (
    TrainConfig,
    loso_split,
    records_for_specimens,
    split_calibration_projections,
    train,
    write_history_csv,
)

TINY_MODEL = ModelConfig(input_size=32, stem_out_channels=4, block_channels=(8,))


def fold_samples(manifest, held_out="spec002"):
    train_ids = [s for s in manifest.specimen_ids() if s != held_out]
    train_recs = records_for_specimens(manifest, train_ids)
    val_recs = records_for_specimens(manifest, [held_out])
    return (
        load_training_samples(manifest, train_recs),
        load_training_samples(manifest, val_recs),
    )


def quick_train_config(**overrides):
    defaults = dict(
        learning_rate=0.002,
        batch_size=16,
        epochs=20,
        patience=20,
        seed=0,
        augment=AugmentParams(
            noise_prob=0.3, noise_sigma=(0.005, 0.02), blur_prob=0.0,
            brightness_prob=0.3, brightness_range=(-0.05, 0.05), contrast_prob=0.0,
        ),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestLosoSplit:
    def test_one_fold_per_specimen(self, toy_manifest):
        folds = loso_split(toy_manifest)
        assert len(folds) == 3
        for train_ids, held_out in folds:
            assert held_out not in train_ids
            assert len(train_ids) == 2

    def test_held_out_sets_partition_specimens(self, toy_manifest):
        folds = loso_split(toy_manifest)
        held = [h for _, h in folds]
        assert sorted(held) == toy_manifest.specimen_ids()
        assert len(set(held)) == len(held)

    def test_zero_sample_leakage(self, toy_manifest):
        for train_ids, held_out in loso_split(toy_manifest):
            train_keys = {
                (r.specimen_id, r.projection_id, r.sample_id)
                for r in records_for_specimens(toy_manifest, train_ids)
            }
            held_keys = {
                (r.specimen_id, r.projection_id, r.sample_id)
                for r in records_for_specimens(toy_manifest, [held_out])
            }
            assert not train_keys & held_keys


class TestCalibrationSplit:
    def test_disjoint_and_covering(self, toy_manifest):
        rng = np.random.default_rng(0)
        train, cal = split_calibration_projections(
            toy_manifest, ["spec000", "spec001"], 0.2, rng
        )
        train_keys = {(r.specimen_id, r.projection_id, r.sample_id) for r in train}
        cal_keys = {(r.specimen_id, r.projection_id, r.sample_id) for r in cal}
        assert not train_keys & cal_keys
        total = len(records_for_specimens(toy_manifest, ["spec000", "spec001"]))
        assert len(train) + len(cal) == total
        assert len(cal) > 0

    def test_never_contains_test_specimen(self, toy_manifest):
        rng = np.random.default_rng(1)
        train, cal = split_calibration_projections(
            toy_manifest, ["spec000", "spec001"], 0.2, rng
        )
        for rec in (*train, *cal):
            assert rec.specimen_id != "spec002"


class TestTrain:
    def test_separable_toy_reaches_high_accuracy(self, toy_manifest):
        train_split, val_split = fold_samples(toy_manifest)
        result = train(train_split, val_split, TINY_MODEL, quick_train_config())
        best = max(h.val_accuracy for h in result.history)
        assert best >= 0.95
        assert len(result.history) <= 20

    def test_zero_learning_rate_leaves_parameters(self, toy_manifest):
        train_split, val_split = fold_samples(toy_manifest)
        cfg = quick_train_config(learning_rate=0.0, epochs=1)
        torch.manual_seed(cfg.seed)
        from regverify.model import VerifierNet

        reference = VerifierNet(TINY_MODEL)
        ref_params = {n: p.detach().clone() for n, p in reference.named_parameters()}
        result = train(train_split, val_split, TINY_MODEL, cfg)
        for name, param in result.model.named_parameters():
            assert torch.equal(param, ref_params[name]), name

    def test_same_seed_identical_loss_curves(self, toy_manifest):
        train_split, val_split = fold_samples(toy_manifest)
        cfg = quick_train_config(epochs=3)
        r1 = train(train_split, val_split, TINY_MODEL, cfg)
        r2 = train(train_split, val_split, TINY_MODEL, cfg)
        curve1 = [(h.train_loss, h.val_loss, h.val_accuracy) for h in r1.history]
        curve2 = [(h.train_loss, h.val_loss, h.val_accuracy) for h in r2.history]
        assert curve1 == curve2

    def test_single_class_split_rejected(self, toy_manifest):
        train_split, val_split = fold_samples(toy_manifest)
        rejects_only = [
            s for s in train_split if s.record.label is RegistrationLabel.REJECT
        ]
        with pytest.raises(InvalidInputError):
            train(
                rejects_only,
                val_split,
                TINY_MODEL,
                quick_train_config(epochs=1),
                apply_preprocessing=False,
            )

    def test_divergent_loss_raises_with_epoch(self, toy_manifest):
        train_split, val_split = fold_samples(toy_manifest)
        cfg = quick_train_config(learning_rate=1e12, epochs=5)
        with pytest.raises(TrainingError, match="epoch"):
            train(train_split, val_split, TINY_MODEL, cfg)

    def test_history_csv(self, toy_manifest, tmp_path):
        train_split, val_split = fold_samples(toy_manifest)
        result = train(train_split, val_split, TINY_MODEL, quick_train_config(epochs=2))
        path = tmp_path / "history.csv"
        write_history_csv(path, result.history)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_acc"
        assert len(lines) == len(result.history) + 1
