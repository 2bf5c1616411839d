import json

import pytest

from regverify.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    """Small separable dataset generated through the CLI itself."""
    root = tmp_path_factory.mktemp("cli_data")
    code = run(
        [
            "generate", "--out", root, "--seed", 11, "--specimens", 3,
            "--projections", 6, "--samples", 8, "--image-size", 32, "--separable",
        ]
    )
    assert code == 0
    return root


@pytest.fixture(scope="module")
def cli_fold(cli_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_fold")
    config = out / "cfg.json"
    config.write_text(
        json.dumps(
            {
                "model": {"input_size": 32, "stem_out_channels": 4, "block_channels": [8]},
                "train": {
                    "learning_rate": 0.002,
                    "epochs": 15,
                    "patience": 15,
                    "augment": {
                        "noise_prob": 0.3, "noise_sigma": [0.005, 0.02],
                        "blur_prob": 0.0,
                        "brightness_prob": 0.3, "brightness_range": [-0.05, 0.05],
                        "contrast_prob": 0.0,
                    },
                },
            }
        )
    )
    code = run(
        ["train", "--data", cli_dataset, "--fold", "0", "--out", out, "--config", config]
    )
    assert code == 0
    return out / "fold0", config


class TestGenerate:
    def test_deterministic_manifests(self, tmp_path):
        args = [
            "generate", "--seed", 0, "--specimens", 2, "--projections", 2,
            "--samples", 3, "--image-size", 32, "--separable",
        ]
        assert run(args + ["--out", tmp_path / "a"]) == 0
        assert run(args + ["--out", tmp_path / "b"]) == 0
        m1 = json.loads((tmp_path / "a" / "manifest.json").read_text())
        m2 = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert m1 == m2
        assert m1["config_hash"] == m2["config_hash"]

    def test_run_manifest_written(self, cli_dataset):
        run_manifest = json.loads((cli_dataset / "run_manifest.json").read_text())
        assert run_manifest["command"] == "generate"
        assert "config_hash" in run_manifest
        assert run_manifest["seeds"] == {"dataset": 11}


class TestTrainAndCalibrate:
    def test_fold_artifacts(self, cli_fold):
        fold_dir, _ = cli_fold
        for name in ("ckpt.pt", "calibration.json", "history.csv", "predictions.json"):
            assert (fold_dir / name).exists(), name

    def test_calibrate_writes_json(self, cli_dataset, cli_fold, tmp_path):
        fold_dir, _ = cli_fold
        out = tmp_path / "cal.json"
        code = run(
            [
                "calibrate", "--data", cli_dataset, "--ckpt", fold_dir / "ckpt.pt",
                "--out", out, "--alpha", "0.1",
            ]
        )
        assert code == 0
        payload = json.loads(out.read_text())
        assert set(payload) == {"alpha", "threshold", "n", "scores"}
        assert payload["alpha"] == 0.1


class TestExplain:
    def test_heatmap_png_and_set_json(self, cli_dataset, cli_fold, tmp_path):
        fold_dir, _ = cli_fold
        manifest = json.loads((cli_dataset / "manifest.json").read_text())
        held_out = json.loads((fold_dir / "report.json").read_text())["held_out"]
        case = next(
            f"{s['specimen_id']}/{s['projection_id']}/{s['sample_id']}"
            for s in manifest["samples"]
            if s["specimen_id"] == held_out
        )
        out = tmp_path / "h.png"
        code = run(
            [
                "explain", "--data", cli_dataset, "--ckpt", fold_dir / "ckpt.pt",
                "--case", case, "--out", out,
            ]
        )
        assert code == 0
        assert out.exists() and out.stat().st_size > 0
        sidecar = json.loads(out.with_suffix(".json").read_text())
        assert sidecar["case"] == case
        assert sidecar["prediction"] in ("ACCEPT", "REJECT")
        assert "prediction_set" in sidecar  # calibration.json sits next to ckpt

    def test_unknown_case_is_validation_error(self, cli_dataset, cli_fold, tmp_path):
        fold_dir, _ = cli_fold
        code = run(
            [
                "explain", "--data", cli_dataset, "--ckpt", fold_dir / "ckpt.pt",
                "--case", "nope/nope/nope", "--out", tmp_path / "h.png",
            ]
        )
        assert code == 1


class TestEvaluate:
    def test_full_cv_outputs(self, cli_dataset, cli_fold, tmp_path):
        _, config = cli_fold
        out = tmp_path / "eval"
        code = run(
            ["evaluate", "--data", cli_dataset, "--out", out, "--config", config]
        )
        assert code == 0
        assert (out / "aggregate.csv").exists()
        assert (out / "metrics.png").exists()
        assert (out / "training_curves.png").exists()
        assert (out / "cv_result.json").exists()
        agg = json.loads((out / "cv_result.json").read_text())["aggregate"]
        assert agg["auc"]["mean"] >= 0.9  # separable sanity
        header = (out / "aggregate.csv").read_text().splitlines()[0]
        assert header == "fold,held_out,accuracy,precision,recall,f1,auc,coverage"


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1

    def test_no_subcommand(self):
        assert run([]) == 1

    def test_version_exits_zero(self):
        assert run(["--version"]) == 0

    def test_unknown_config_key_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"frobs": 2}))
        code = run(["generate", "--out", tmp_path / "d", "--config", bad])
        assert code == 1

    def test_unknown_section_key_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"warp_speed": 9}}))
        code = run(["generate", "--out", tmp_path / "d", "--config", bad])
        assert code == 1

    def test_missing_data_dir_is_runtime_error(self, tmp_path):
        code = run(["evaluate", "--data", tmp_path / "missing", "--out", tmp_path / "o"])
        assert code == 2
