"""Labeled X-ray/DRR datasets: generation, preprocessing, and persistence.

Layout on disk::

    <root>/manifest.json
    <root>/<specimen_id>/<projection_id>/<sample_id>.xray.f32
    <root>/<specimen_id>/<projection_id>/<sample_id>.drr.f32
    <root>/<specimen_id>/<projection_id>/<sample_id>.meta.json

Images are raw little-endian float32 grids; the meta sidecar records dims,
dtype, endianness, the saved offset, the mTRE, and the label, so every
stored label is recomputable from first principles.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import GenerationError, InvalidInputError
from .geometry import (
    DEFAULT_THRESHOLD_MM,
    LandmarkSet,
    OffsetBounds,
    RegistrationLabel,
    RigidTransform6DoF,
    classify,
    mtre,
    sample_offset,
)
from .phantom import (
    PhantomSpecimen,
    ProjectionGeometry,
    generate_specimen,
    render_projection,
)


@dataclass(frozen=True)
class ImagePair:
    """Co-registered X-ray and DRR, both float arrays in [0, 1]."""

    xray: np.ndarray
    drr: np.ndarray

    def __post_init__(self):
        xray = np.asarray(self.xray, dtype=np.float32)
        drr = np.asarray(self.drr, dtype=np.float32)
        if xray.shape != drr.shape or xray.ndim != 2:
            raise InvalidInputError("xray and drr must be 2D arrays of identical shape")
        for name, img in (("xray", xray), ("drr", drr)):
            if not np.all(np.isfinite(img)):
                raise InvalidInputError(f"{name} contains non-finite values")
            if img.min() < 0.0 or img.max() > 1.0:
                raise InvalidInputError(f"{name} values must lie in [0, 1]")
        object.__setattr__(self, "xray", xray)
        object.__setattr__(self, "drr", drr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.xray.shape


@dataclass(frozen=True)
class RegistrationSample:
    specimen_id: str
    projection_id: str
    sample_id: str
    pair: ImagePair
    offset: RigidTransform6DoF
    mtre_mm: float
    label: RegistrationLabel


@dataclass(frozen=True)
class SampleRecord:
    """Manifest row: everything about a sample except its pixels."""

    specimen_id: str
    projection_id: str
    sample_id: str
    xray_path: str
    drr_path: str
    meta_path: str
    offset: RigidTransform6DoF
    mtre_mm: float
    label: RegistrationLabel

    def to_dict(self) -> dict:
        return {
            "specimen_id": self.specimen_id,
            "projection_id": self.projection_id,
            "sample_id": self.sample_id,
            "xray_path": self.xray_path,
            "drr_path": self.drr_path,
            "meta_path": self.meta_path,
            "offset": self.offset.to_dict(),
            "mtre_mm": self.mtre_mm,
            "label": self.label.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            specimen_id=d["specimen_id"],
            projection_id=d["projection_id"],
            sample_id=d["sample_id"],
            xray_path=d["xray_path"],
            drr_path=d["drr_path"],
            meta_path=d["meta_path"],
            offset=RigidTransform6DoF.from_dict(d["offset"]),
            mtre_mm=d["mtre_mm"],
            label=RegistrationLabel(d["label"]),
        )


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    threshold_mm: float
    seed: int
    config_hash: str
    specimens: dict[str, dict]  # specimen_id -> serialized PhantomSpecimen
    geometry: ProjectionGeometry
    view_poses: dict[str, dict]  # "<specimen>/<projection>" -> serialized pose
    samples: tuple[SampleRecord, ...]

    def to_dict(self) -> dict:
        counts: dict[str, dict[str, int]] = {}
        for rec in self.samples:
            per_spec = counts.setdefault(rec.specimen_id, {})
            per_spec[rec.projection_id] = per_spec.get(rec.projection_id, 0) + 1
        return {
            "threshold_mm": self.threshold_mm,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "specimens": self.specimens,
            "geometry": self.geometry.to_dict(),
            "view_poses": self.view_poses,
            "counts": counts,
            "samples": [rec.to_dict() for rec in self.samples],
        }

    @classmethod
    def from_dict(cls, d: dict, root: Path) -> "DatasetManifest":
        return cls(
            root=Path(root),
            threshold_mm=d["threshold_mm"],
            seed=d["seed"],
            config_hash=d["config_hash"],
            specimens=d["specimens"],
            geometry=ProjectionGeometry.from_dict(d["geometry"]),
            view_poses=d["view_poses"],
            samples=tuple(SampleRecord.from_dict(s) for s in d["samples"]),
        )

    def specimen_ids(self) -> list[str]:
        return sorted(self.specimens)

    def specimen(self, specimen_id: str) -> PhantomSpecimen:
        return PhantomSpecimen.from_dict(self.specimens[specimen_id])

    def landmarks(self, specimen_id: str) -> LandmarkSet:
        return self.specimen(specimen_id).landmarks

    def prevalence(self) -> float:
        accepted = sum(1 for r in self.samples if r.label is RegistrationLabel.ACCEPT)
        return accepted / len(self.samples)


@dataclass(frozen=True)
class AugmentParams:
    """Non-geometric augmentations, each applied with its own probability."""

    noise_prob: float = 0.5
    noise_sigma: tuple[float, float] = (0.01, 0.05)
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    brightness_prob: float = 0.5
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    contrast_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.8, 1.25)

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls(noise_prob=0.0, blur_prob=0.0, brightness_prob=0.0, contrast_prob=0.0)


@dataclass(frozen=True)
class DatasetConfig:
    n_specimens: int = 5
    projections_per_specimen: int = 40
    samples_per_projection: int = 20
    seed: int = 0
    threshold_mm: float = DEFAULT_THRESHOLD_MM
    target_prevalence: float = 0.277
    prevalence_tolerance: float = 0.05
    max_resample_rounds: int = 200
    geometry: ProjectionGeometry = field(default_factory=ProjectionGeometry)
    bounds: OffsetBounds = field(default_factory=OffsetBounds)
    # View poses keep each projection a distinct, in-detector vantage point.
    view_rot_bound_rad: float = math.radians(25.0)
    view_trans_bound_mm: float = 12.0
    # Separable mode: accepts are exactly identity, rejects are far past the
    # threshold.  Used for training sanity runs, not for realistic data.
    separable: bool = False
    separable_reject_factor: float = 5.0

    def __post_init__(self):
        if min(self.n_specimens, self.projections_per_specimen, self.samples_per_projection) < 1:
            raise InvalidInputError("dataset dimensions must be >= 1")
        if not 0.0 < self.target_prevalence < 1.0:
            raise InvalidInputError("target prevalence must be in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "n_specimens": self.n_specimens,
            "projections_per_specimen": self.projections_per_specimen,
            "samples_per_projection": self.samples_per_projection,
            "seed": self.seed,
            "threshold_mm": self.threshold_mm,
            "target_prevalence": self.target_prevalence,
            "prevalence_tolerance": self.prevalence_tolerance,
            "max_resample_rounds": self.max_resample_rounds,
            "geometry": self.geometry.to_dict(),
            "bounds": {
                "rot_min": self.bounds.rot_min.tolist(),
                "rot_max": self.bounds.rot_max.tolist(),
                "trans_min": self.bounds.trans_min.tolist(),
                "trans_max": self.bounds.trans_max.tolist(),
            },
            "view_rot_bound_rad": self.view_rot_bound_rad,
            "view_trans_bound_mm": self.view_trans_bound_mm,
            "separable": self.separable,
            "separable_reject_factor": self.separable_reject_factor,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def augment(image: np.ndarray, rng: np.random.Generator, params: AugmentParams) -> np.ndarray:
    """Apply noise/blur/brightness/contrast, each with its own probability.

    Output is clipped back to [0, 1]; geometry is never touched, so a
    sample's label is unaffected.
    """
    out = np.asarray(image, dtype=np.float32).copy()
    if rng.random() < params.noise_prob:
        sigma = rng.uniform(*params.noise_sigma)
        out = out + rng.normal(0.0, sigma, out.shape).astype(np.float32)
    if rng.random() < params.blur_prob:
        sigma = rng.uniform(*params.blur_sigma)
        out = gaussian_filter(out, sigma=sigma)
    if rng.random() < params.brightness_prob:
        out = out + rng.uniform(*params.brightness_range)
    if rng.random() < params.contrast_prob:
        factor = rng.uniform(*params.contrast_range)
        out = (out - 0.5) * factor + 0.5
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_pair(pair: ImagePair, rng: np.random.Generator, params: AugmentParams) -> ImagePair:
    return ImagePair(augment(pair.xray, rng, params), augment(pair.drr, rng, params))


def make_sample(
    spec: PhantomSpecimen,
    geom: ProjectionGeometry,
    offset: RigidTransform6DoF,
    specimen_id: str = "",
    projection_id: str = "",
    sample_id: str = "",
    view_pose: RigidTransform6DoF | None = None,
    threshold_mm: float = DEFAULT_THRESHOLD_MM,
) -> RegistrationSample:
    """Render the X-ray at the ground-truth view and the DRR at the offset view.

    The ground truth is the identity offset; a per-projection view pose is
    applied to both renders and cancels out of the mTRE.
    """
    if view_pose is None:
        view_pose = RigidTransform6DoF.identity()
    xray = render_projection(spec, geom, view_pose)
    drr = render_projection(spec, geom, view_pose.compose(offset))
    error = mtre(offset, RigidTransform6DoF.identity(), spec.landmarks)
    return RegistrationSample(
        specimen_id=specimen_id or spec.specimen_id,
        projection_id=projection_id,
        sample_id=sample_id,
        pair=ImagePair(xray, drr),
        offset=offset,
        mtre_mm=error,
        label=classify(error, threshold_mm),
    )


def _sample_view_pose(rng: np.random.Generator, cfg: DatasetConfig) -> RigidTransform6DoF:
    rot = rng.uniform(-cfg.view_rot_bound_rad, cfg.view_rot_bound_rad, 3)
    trans = np.array(
        [
            rng.uniform(-cfg.view_trans_bound_mm, cfg.view_trans_bound_mm),
            rng.uniform(-cfg.view_trans_bound_mm, cfg.view_trans_bound_mm),
            rng.uniform(-cfg.view_trans_bound_mm, cfg.view_trans_bound_mm),
        ]
    )
    return RigidTransform6DoF(rot, trans)


def _offset_with_label(
    rng: np.random.Generator,
    landmarks: LandmarkSet,
    cfg: DatasetConfig,
    want_accept: bool,
) -> RigidTransform6DoF:
    """Rejection-resample an offset whose mTRE falls in the wanted class.

    Accepted offsets are produced by scaling a uniform draw down to a random
    sub-threshold error magnitude; rejections keep redrawing (and inflating,
    if needed) until the error clears the threshold.
    """
    identity = RigidTransform6DoF.identity()
    if cfg.separable and want_accept:
        return identity
    for _ in range(cfg.max_resample_rounds):
        draw = sample_offset(rng, cfg.bounds)
        err = mtre(draw, identity, landmarks)
        if cfg.separable:
            floor = cfg.separable_reject_factor * cfg.threshold_mm
            if err >= floor:
                return draw
            if err > 0:
                ratio = 2.0 * floor / err
                scaled = RigidTransform6DoF(draw.rotation * ratio, draw.translation * ratio)
                if mtre(scaled, identity, landmarks) >= floor:
                    return scaled
            continue
        if not want_accept:
            if err >= cfg.threshold_mm:
                return draw
            scaled = RigidTransform6DoF(draw.rotation * 2.0, draw.translation * 2.0)
            if mtre(scaled, identity, landmarks) >= cfg.threshold_mm:
                return scaled
            continue
        if err < cfg.threshold_mm:
            return draw
        if err == 0.0:
            return draw
        # mTRE is close to linear in the offset near zero, so one scaling
        # almost always lands below the threshold; verify and retry if not.
        target = rng.uniform(0.05, 0.95) * cfg.threshold_mm
        ratio = target / err
        scaled = RigidTransform6DoF(draw.rotation * ratio, draw.translation * ratio)
        if mtre(scaled, identity, landmarks) < cfg.threshold_mm:
            return scaled
    raise GenerationError(
        f"could not draw a {'sub' if want_accept else 'supra'}-threshold offset "
        f"in {cfg.max_resample_rounds} rounds"
    )


def _write_f32(path: Path, image: np.ndarray) -> dict:
    data = np.ascontiguousarray(image, dtype="<f4")
    path.write_bytes(data.tobytes())
    return {"dims": list(image.shape), "dtype": "float32", "endianness": "little"}


def read_f32(path: Path, dims: tuple[int, int]) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def load_pair(root: Path, rec: SampleRecord) -> ImagePair:
    meta = json.loads((Path(root) / rec.meta_path).read_text())
    dims = tuple(meta["image"]["dims"])
    return ImagePair(
        read_f32(Path(root) / rec.xray_path, dims),
        read_f32(Path(root) / rec.drr_path, dims),
    )


def build_dataset(cfg: DatasetConfig, out_dir: Path) -> DatasetManifest:
    """Generate the full labeled dataset and write it to ``out_dir``.

    Deterministic for a given config: every (specimen, projection, sample)
    task derives its own rng stream, so generation order cannot change the
    result.  Fails if the achieved accept prevalence misses the target by
    more than the configured tolerance.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.hash()

    specimens: dict[str, dict] = {}
    view_poses: dict[str, dict] = {}
    records: list[SampleRecord] = []

    for spec_idx in range(cfg.n_specimens):
        spec = generate_specimen(cfg.seed * 1000 + spec_idx, f"spec{spec_idx:03d}")
        specimens[spec.specimen_id] = spec.to_dict()
        for proj_idx in range(cfg.projections_per_specimen):
            proj_id = f"proj{proj_idx:03d}"
            proj_rng = np.random.default_rng([cfg.seed, spec_idx, proj_idx])
            view_pose = _sample_view_pose(proj_rng, cfg)
            view_poses[f"{spec.specimen_id}/{proj_id}"] = view_pose.to_dict()
            proj_dir = out_dir / spec.specimen_id / proj_id
            proj_dir.mkdir(parents=True, exist_ok=True)
            for samp_idx in range(cfg.samples_per_projection):
                rng = np.random.default_rng([cfg.seed, spec_idx, proj_idx, samp_idx])
                want_accept = rng.random() < cfg.target_prevalence
                offset = _offset_with_label(rng, spec.landmarks, cfg, want_accept)
                sample_id = f"s{samp_idx:03d}"
                sample = make_sample(
                    spec,
                    cfg.geometry,
                    offset,
                    projection_id=proj_id,
                    sample_id=sample_id,
                    view_pose=view_pose,
                    threshold_mm=cfg.threshold_mm,
                )
                rel = Path(spec.specimen_id) / proj_id
                xray_rel = str(rel / f"{sample_id}.xray.f32")
                drr_rel = str(rel / f"{sample_id}.drr.f32")
                meta_rel = str(rel / f"{sample_id}.meta.json")
                image_meta = _write_f32(out_dir / xray_rel, sample.pair.xray)
                _write_f32(out_dir / drr_rel, sample.pair.drr)
                meta = {
                    "specimen_id": sample.specimen_id,
                    "projection_id": proj_id,
                    "sample_id": sample_id,
                    "image": image_meta,
                    "offset": offset.to_dict(),
                    "mtre_mm": sample.mtre_mm,
                    "label": sample.label.value,
                }
                (out_dir / meta_rel).write_text(json.dumps(meta, indent=1))
                records.append(
                    SampleRecord(
                        specimen_id=sample.specimen_id,
                        projection_id=proj_id,
                        sample_id=sample_id,
                        xray_path=xray_rel,
                        drr_path=drr_rel,
                        meta_path=meta_rel,
                        offset=offset,
                        mtre_mm=sample.mtre_mm,
                        label=sample.label,
                    )
                )

    manifest = DatasetManifest(
        root=out_dir,
        threshold_mm=cfg.threshold_mm,
        seed=cfg.seed,
        config_hash=config_hash,
        specimens=specimens,
        geometry=cfg.geometry,
        view_poses=view_poses,
        samples=tuple(records),
    )
    achieved = manifest.prevalence()
    if abs(achieved - cfg.target_prevalence) > cfg.prevalence_tolerance:
        raise GenerationError(
            f"achieved accept prevalence {achieved:.4f} outside "
            f"{cfg.target_prevalence} +/- {cfg.prevalence_tolerance}"
        )
    save_manifest(manifest)
    return manifest


def save_manifest(manifest: DatasetManifest) -> Path:
    path = Path(manifest.root) / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    return path


def load_manifest(root: Path) -> DatasetManifest:
    root = Path(root)
    data = json.loads((root / "manifest.json").read_text())
    return DatasetManifest.from_dict(data, root)


def filter_projections(
    samples: tuple[SampleRecord, ...], max_rejected_fraction: float = 0.9
) -> tuple[SampleRecord, ...]:
    """Drop projections whose rejected fraction is strictly greater than the cap.

    Meant for training splits only; validation and test splits must pass
    through untouched.
    """
    by_projection: dict[tuple[str, str], list[SampleRecord]] = {}
    for rec in samples:
        by_projection.setdefault((rec.specimen_id, rec.projection_id), []).append(rec)
    kept: list[SampleRecord] = []
    for rec in samples:
        group = by_projection[(rec.specimen_id, rec.projection_id)]
        rejected = sum(1 for r in group if r.label is RegistrationLabel.REJECT)
        if rejected / len(group) <= max_rejected_fraction:
            kept.append(rec)
    return tuple(kept)


@dataclass(frozen=True)
class TrainingSample:
    """In-memory training row; images may be augmented copies."""

    record: SampleRecord
    pair: ImagePair


def load_training_samples(manifest: DatasetManifest, records) -> list[TrainingSample]:
    return [TrainingSample(rec, load_pair(manifest.root, rec)) for rec in records]


def oversample_accepts(
    samples: list[TrainingSample],
    rng: np.random.Generator,
    params: AugmentParams | None = None,
    target_ratio: float = 1.0,
) -> list[TrainingSample]:
    """Duplicate accepted samples with pixel augmentations until the class
    ratio (accept : reject) reaches ``target_ratio``.

    Only non-geometric augmentations are applied, so duplicated labels stay
    valid by construction.
    """
    if params is None:
        params = AugmentParams()
    accepts = [s for s in samples if s.record.label is RegistrationLabel.ACCEPT]
    rejects = [s for s in samples if s.record.label is RegistrationLabel.REJECT]
    if not accepts:
        raise InvalidInputError("training split has no accepted samples to oversample")
    needed = int(round(len(rejects) * target_ratio)) - len(accepts)
    out = list(samples)
    for i in range(max(0, needed)):
        src = accepts[i % len(accepts)]
        dup_record = replace(src.record, sample_id=f"{src.record.sample_id}+aug{i:03d}")
        out.append(TrainingSample(dup_record, augment_pair(src.pair, rng, params)))
    return out
