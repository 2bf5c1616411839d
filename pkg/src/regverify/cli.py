"""Command-line entry point.

Subcommands: generate | train | calibrate | evaluate | explain | serve |
export.  Every artifact-producing run writes a small run manifest (inputs,
config hash, seeds) next to its outputs so results are reproducible from
the recorded state.  Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from importlib.metadata import version as pkg_version
from pathlib import Path

from .errors import ConfigError, InvalidInputError, RegverifyError

VALIDATION_EXIT = 1
RUNTIME_EXIT = 2

CONFIG_SECTIONS = ("dataset", "model", "train")
CONFIG_TOP_KEYS = {"threshold_mm", "alpha", "seed", *CONFIG_SECTIONS}


def _package_version() -> str:
    try:
        return pkg_version("regverify")
    except Exception:
        return "0.0.0-dev"


def load_run_config(path: str | None) -> dict:
    """Parse and schema-check the optional JSON config file.

    Unknown keys anywhere are rejected before any work starts.
    """
    if path is None:
        return {}
    from .dataset import AugmentParams, DatasetConfig
    from .model import ModelConfig
    from .training import TrainConfig

    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - CONFIG_TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    section_fields = {
        "dataset": {f.name for f in dataclasses.fields(DatasetConfig)},
        "model": {f.name for f in dataclasses.fields(ModelConfig)},
        "train": {f.name for f in dataclasses.fields(TrainConfig)} | {"augment"},
    }
    for section in CONFIG_SECTIONS:
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        bad = set(body) - section_fields[section]
        if bad:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(bad)}")
        if section == "train" and isinstance(body.get("augment"), dict):
            aug_fields = {f.name for f in dataclasses.fields(AugmentParams)}
            bad = set(body["augment"]) - aug_fields
            if bad:
                raise ConfigError(f"unknown augment keys: {sorted(bad)}")
    return raw


def write_run_manifest(out_dir: Path, command: str, inputs: dict, seeds: dict) -> None:
    payload = {
        "command": command,
        "version": _package_version(),
        "inputs": inputs,
        "seeds": seeds,
    }
    payload["config_hash"] = hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()[:16]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=1))


def _dataset_config(cfg: dict, args) -> "DatasetConfig":
    from .dataset import DatasetConfig
    from .phantom import ProjectionGeometry

    body = dict(cfg.get("dataset", {}))
    if "geometry" in body:
        body["geometry"] = ProjectionGeometry.from_dict(body["geometry"])
    if "threshold_mm" in cfg:
        body.setdefault("threshold_mm", cfg["threshold_mm"])
    if "seed" in cfg:
        body.setdefault("seed", cfg["seed"])
    # flags win over the config file
    if getattr(args, "seed", None) is not None:
        body["seed"] = args.seed
    if getattr(args, "specimens", None) is not None:
        body["n_specimens"] = args.specimens
    if getattr(args, "projections", None) is not None:
        body["projections_per_specimen"] = args.projections
    if getattr(args, "samples", None) is not None:
        body["samples_per_projection"] = args.samples
    if getattr(args, "separable", False):
        body["separable"] = True
        body.setdefault("target_prevalence", 0.5)
        body.setdefault("prevalence_tolerance", 0.2)
    if getattr(args, "image_size", None) is not None:
        body["geometry"] = ProjectionGeometry(
            image_width_px=args.image_size, image_height_px=args.image_size
        )
    return DatasetConfig(**body)


def _model_config(cfg: dict, args=None, manifest=None):
    from .model import ModelConfig

    body = dict(cfg.get("model", {}))
    if body.get("block_channels") is not None:
        body["block_channels"] = tuple(body["block_channels"])
    if args is not None and getattr(args, "image_size", None) is not None:
        body["input_size"] = args.image_size
    if "input_size" not in body and manifest is not None:
        geom = manifest.geometry
        if geom.image_width_px == geom.image_height_px:
            body["input_size"] = geom.image_width_px
    return ModelConfig(**body)


def _train_config(cfg: dict, args=None):
    from .dataset import AugmentParams
    from .training import TrainConfig

    body = dict(cfg.get("train", {}))
    if isinstance(body.get("augment"), dict):
        aug = dict(body["augment"])
        for key, value in aug.items():
            if isinstance(value, list):
                aug[key] = tuple(value)
        body["augment"] = AugmentParams(**aug)
    if "seed" in cfg:
        body.setdefault("seed", cfg["seed"])
    if args is not None:
        if getattr(args, "seed", None) is not None:
            body["seed"] = args.seed
        if getattr(args, "epochs", None) is not None:
            body["epochs"] = args.epochs
    return TrainConfig(**body)


# -- subcommand implementations ----------------------------------------------


def cmd_generate(args) -> int:
    from .dataset import build_dataset

    cfg = load_run_config(args.config)
    dataset_cfg = _dataset_config(cfg, args)
    manifest = build_dataset(dataset_cfg, Path(args.out))
    write_run_manifest(
        Path(args.out),
        "generate",
        inputs={"config_file": args.config, "dataset_config": dataset_cfg.to_dict()},
        seeds={"dataset": dataset_cfg.seed},
    )
    print(
        f"generated {len(manifest.samples)} samples "
        f"({manifest.prevalence():.1%} accepted) in {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    from .dataset import load_manifest
    from .evaluate import run_fold
    from .training import loso_split

    cfg = load_run_config(args.config)
    manifest = load_manifest(Path(args.data))
    folds = loso_split(manifest)
    if not 0 <= args.fold < len(folds):
        raise InvalidInputError(f"fold must be in [0, {len(folds)})")
    train_specimens, held_out = folds[args.fold]
    out_path = Path(args.out)
    # --out may name the checkpoint file or a directory for fold artifacts
    work_dir = out_path.parent if out_path.suffix else out_path
    result = run_fold(
        manifest,
        args.fold,
        train_specimens,
        held_out,
        _model_config(cfg, manifest=manifest),
        _train_config(cfg, args),
        alpha=cfg.get("alpha", args.alpha),
        out_dir=work_dir,
    )
    produced = work_dir / f"fold{args.fold}" / "ckpt.pt"
    if out_path.suffix:
        out_path.write_bytes(produced.read_bytes())
    write_run_manifest(
        produced.parent,
        "train",
        inputs={"data": str(args.data), "fold": args.fold, "config_file": args.config},
        seeds={"train": _train_config(cfg, args).seed},
    )
    r = result.report
    print(
        f"fold {args.fold} (held out {held_out}): "
        f"acc={r.accuracy:.3f} auc={'n/a' if r.auc is None else f'{r.auc:.3f}'} "
        f"coverage={result.coverage:.3f}"
    )
    return 0


def cmd_calibrate(args) -> int:
    from .dataset import load_manifest, load_pair
    from .explain import calibrate
    from .model import load_checkpoint, predict_batch

    manifest = load_manifest(Path(args.data))
    model, payload = load_checkpoint(Path(args.ckpt))
    specimens = (
        args.specimens.split(",") if args.specimens else payload["train_specimens"]
    )
    records = [r for r in manifest.samples if r.specimen_id in set(specimens)]
    if not records:
        raise InvalidInputError(f"no samples for specimens {specimens}")
    outputs = predict_batch(model, [load_pair(manifest.root, r) for r in records])
    calibration = calibrate(
        [o.probability_pair for o in outputs],
        [r.label for r in records],
        args.alpha,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    calibration.save(out)
    write_run_manifest(
        out.parent,
        "calibrate",
        inputs={"data": str(args.data), "ckpt": str(args.ckpt), "specimens": specimens},
        seeds={},
    )
    print(f"calibrated on {calibration.n} samples: threshold={calibration.threshold:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .dataset import load_manifest
    from .evaluate import run_cv
    from .reporting import plot_fold_metrics, plot_training_curves, write_aggregate_csv
    from .training import EpochStats

    cfg = load_run_config(args.config)
    manifest = load_manifest(Path(args.data))
    out_dir = Path(args.out)
    result = run_cv(
        manifest,
        _model_config(cfg, manifest=manifest),
        _train_config(cfg, args),
        alpha=cfg.get("alpha", args.alpha),
        out_dir=out_dir,
    )
    write_aggregate_csv(out_dir / "aggregate.csv", result)
    plot_fold_metrics(out_dir / "metrics.png", result)
    histories = {}
    for fold in result.folds:
        rows = (out_dir / f"fold{fold.fold_index}" / "history.csv").read_text().splitlines()[1:]
        histories[f"fold{fold.fold_index}"] = [
            EpochStats(int(e), float(tl), float(vl), float(va))
            for e, tl, vl, va in (row.split(",") for row in rows)
        ]
    plot_training_curves(out_dir / "training_curves.png", histories)
    write_run_manifest(
        out_dir,
        "evaluate",
        inputs={"data": str(args.data), "config_file": args.config, "alpha": args.alpha},
        seeds={"train": _train_config(cfg, args).seed},
    )
    agg = result.aggregate
    def s(m):
        v = agg[m]["mean"]
        return "n/a" if v is None else f"{v:.3f}+/-{agg[m]['std']:.3f}"
    print(
        f"{len(result.folds)} folds: acc={s('accuracy')} prec={s('precision')} "
        f"rec={s('recall')} f1={s('f1')} auc={s('auc')} coverage={s('coverage')}"
    )
    return 0


def cmd_explain(args) -> int:
    import numpy as np

    from .dataset import load_manifest, load_pair
    from .explain import ConformalCalibration, grad_cam, predict_set
    from .model import load_checkpoint, predict
    from .service import heatmap_to_png, window_level_to_png

    manifest = load_manifest(Path(args.data))
    model, _ = load_checkpoint(Path(args.ckpt))
    wanted = args.case
    matches = [
        r
        for r in manifest.samples
        if f"{r.specimen_id}/{r.projection_id}/{r.sample_id}" == wanted
    ]
    if not matches:
        raise InvalidInputError(f"case {wanted!r} not found in manifest")
    record = matches[0]
    pair = load_pair(manifest.root, record)
    output = predict(model, pair)
    heatmap = grad_cam(model, pair)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(heatmap_to_png(heatmap.upsampled))
    sidecar = {
        "case": wanted,
        "prediction": output.predicted_label.value,
        "probability_accept": output.probability_accept,
        "actual": record.label.value,
        "mtre_mm": record.mtre_mm,
    }
    calibration_path = args.calibration or (Path(args.ckpt).parent / "calibration.json")
    if Path(calibration_path).exists():
        calibration = ConformalCalibration.load(calibration_path)
        sidecar["prediction_set"] = predict_set(output.probability_pair, calibration).to_dict()
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    if args.xray_png:
        Path(args.xray_png).write_bytes(window_level_to_png(pair.xray))
    write_run_manifest(
        out.parent,
        "explain",
        inputs={"data": str(args.data), "ckpt": str(args.ckpt), "case": wanted},
        seeds={},
    )
    print(f"wrote {out} and {out.with_suffix('.json')}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .dataset import load_manifest
    from .explain import ConformalCalibration
    from .model import load_checkpoint
    from .service import build_study_pool, create_app, load_review_service
    from .study import StudyPool

    sessions_dir = Path(args.sessions)
    pool_path = Path(args.pool) / "pool.json" if args.pool else None
    if pool_path is not None and pool_path.exists():
        service = load_review_service(
            pool_path, sessions_dir, share_cases=args.share_cases
        )
    else:
        missing = []
        if not args.data:
            missing.append("--data <dataset dir>")
        if not args.ckpt:
            missing.append("--ckpt <checkpoint>")
        if missing:
            from .errors import DependencyError

            raise DependencyError(missing)
        manifest = load_manifest(Path(args.data))
        model, payload = load_checkpoint(Path(args.ckpt))
        calibration_path = args.calibration or str(Path(args.ckpt).parent / "calibration.json")
        if not Path(calibration_path).exists():
            from .errors import DependencyError

            raise DependencyError([f"calibration file {calibration_path} (run `regverify calibrate`)"])
        calibration = ConformalCalibration.load(calibration_path)
        specimens = args.specimens.split(",") if args.specimens else [
            s for s in manifest.specimen_ids() if s not in set(payload["train_specimens"])
        ]
        pool_dir = Path(args.pool) if args.pool else Path(args.sessions) / "pool"
        pool = build_study_pool(manifest, model, calibration, specimens, pool_dir)
        from .study import EventLog, ReviewService

        service = ReviewService(
            pool, EventLog(sessions_dir), share_cases_across_conditions=args.share_cases
        )
    app = create_app(service, frontend_dir=Path(args.frontend) if args.frontend else None)
    print(f"serving review console on port {args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_export(args) -> int:
    from .reporting import plot_condition_accuracy, plot_tlx_boxes
    from .service import load_review_service
    from .study import TLX_SCALES, export_csv_tables

    service = load_review_service(Path(args.pool), Path(args.sessions))
    export = service.export_results()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "export.json").write_text(json.dumps(export, indent=1))
    tables = export_csv_tables(export)
    for name, text in tables.items():
        (out_dir / f"{name}.csv").write_text(text)
    per_condition = {
        cond: summary["weighted_accuracy"]
        for cond, summary in export["conditions"].items()
    }
    plot_condition_accuracy(out_dir / "weighted_accuracy.png", per_condition)
    scales: dict[str, dict[str, list[int]]] = {}
    for survey in export["surveys"]:
        bucket = scales.setdefault(survey["condition"], {s: [] for s in TLX_SCALES})
        for scale, value in survey["tlx"].items():
            bucket[scale].append(value)
    if scales:
        plot_tlx_boxes(out_dir / "tlx.png", scales)
    write_run_manifest(
        out_dir,
        "export",
        inputs={"sessions": str(args.sessions), "pool": str(args.pool)},
        seeds={},
    )
    print(f"exported {len(export['decisions'])} decisions to {out_dir}")
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regverify",
        description="Quality assurance pipeline for 2D/3D registration verification.",
    )
    parser.add_argument("--version", action="version", version=_package_version())
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="synthesize a labeled X-ray/DRR dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--specimens", type=int, default=None)
    p.add_argument("--projections", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--separable", action="store_true",
                   help="identity-vs-far offsets (training sanity datasets)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one leave-one-subject-out fold")
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path or fold output dir")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit a conformal calibration for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--specimens", default=None, help="comma-separated specimen ids")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="full leave-one-subject-out evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM heatmap + prediction set for one case")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True, help="specimen/projection/sample key")
    p.add_argument("--out", required=True, help="heatmap PNG path")
    p.add_argument("--calibration", default=None)
    p.add_argument("--xray-png", default=None, help="also write the windowed X-ray PNG")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("serve", help="run the operator review console API")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--calibration", default=None)
    p.add_argument("--pool", default=None, help="study pool dir (reused if it exists)")
    p.add_argument("--sessions", default="sessions")
    p.add_argument("--specimens", default=None)
    p.add_argument("--frontend", default=None, help="built UI directory to serve at /")
    p.add_argument("--share-cases", action="store_true")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", help="score and export recorded review sessions")
    p.add_argument("--sessions", required=True)
    p.add_argument("--pool", required=True, help="pool.json path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are validation failures here
        return VALIDATION_EXIT if exc.code not in (0, None) else 0
    if args.command is None:
        parser.print_usage()
        return VALIDATION_EXIT
    try:
        return args.func(args)
    except (InvalidInputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except RegverifyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
