"""Parametric phantoms and the analytic X-ray/DRR projector.

A specimen is a handful of ellipsoids with attenuation densities plus
surface landmarks.  Projection is a cone-beam pinhole setup: the source
sits at the world origin, the central axis points along +z, the anatomy
frame is centered on the axis at ``source_to_axis_mm``, and the detector
plane lies at ``source_to_detector_mm``.

Each pixel value is the exact line integral through the posed ellipsoids:
the sum over primitives of density times ray chord length.  Rigid motion
preserves arc length, so chords are computed in the anatomy frame after
pulling the ray back through the pose.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geometry import LandmarkSet, RigidTransform6DoF

MIN_PRIMITIVES = 5
MAX_PRIMITIVES = 12
MIN_LANDMARKS = 6


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray  # mm, anatomy frame
    semi_axes: np.ndarray  # mm, axis-aligned
    density: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        semi = np.asarray(self.semi_axes, dtype=np.float64).reshape(3)
        if np.any(semi <= 0):
            raise InvalidInputError("ellipsoid semi-axes must be positive")
        if self.density <= 0:
            raise InvalidInputError("ellipsoid density must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "semi_axes", semi)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "semi_axes": self.semi_axes.tolist(),
            "density": self.density,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ellipsoid":
        return cls(np.asarray(d["center"]), np.asarray(d["semi_axes"]), d["density"])


@dataclass(frozen=True)
class PhantomSpecimen:
    specimen_id: str
    primitives: tuple[Ellipsoid, ...]
    landmarks: LandmarkSet

    def __post_init__(self):
        if self.landmarks is not None and len(self.landmarks) < MIN_LANDMARKS:
            raise InvalidInputError(
                f"specimen needs >= {MIN_LANDMARKS} landmarks, got {len(self.landmarks)}"
            )

    def to_dict(self) -> dict:
        return {
            "specimen_id": self.specimen_id,
            "primitives": [e.to_dict() for e in self.primitives],
            "landmarks": self.landmarks.points.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpecimen":
        return cls(
            d["specimen_id"],
            tuple(Ellipsoid.from_dict(e) for e in d["primitives"]),
            LandmarkSet(np.asarray(d["landmarks"])),
        )


@dataclass(frozen=True)
class ProjectionGeometry:
    source_to_detector_mm: float = 1000.0
    source_to_axis_mm: float = 500.0
    detector_width_mm: float = 300.0
    detector_height_mm: float = 300.0
    image_width_px: int = 128
    image_height_px: int = 128
    principal_point_px: tuple[float, float] | None = None  # (col, row); default center

    def __post_init__(self):
        for name in (
            "source_to_detector_mm",
            "source_to_axis_mm",
            "detector_width_mm",
            "detector_height_mm",
            "image_width_px",
            "image_height_px",
        ):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.source_to_axis_mm >= self.source_to_detector_mm:
            raise InvalidInputError("anatomy must sit between source and detector")
        if self.principal_point_px is None:
            object.__setattr__(
                self,
                "principal_point_px",
                (self.image_width_px / 2.0, self.image_height_px / 2.0),
            )

    @property
    def pixel_pitch_mm(self) -> tuple[float, float]:
        return (
            self.detector_width_mm / self.image_width_px,
            self.detector_height_mm / self.image_height_px,
        )

    @property
    def magnification(self) -> float:
        return self.source_to_detector_mm / self.source_to_axis_mm

    def to_dict(self) -> dict:
        return {
            "source_to_detector_mm": self.source_to_detector_mm,
            "source_to_axis_mm": self.source_to_axis_mm,
            "detector_width_mm": self.detector_width_mm,
            "detector_height_mm": self.detector_height_mm,
            "image_width_px": self.image_width_px,
            "image_height_px": self.image_height_px,
            "principal_point_px": list(self.principal_point_px),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionGeometry":
        d = dict(d)
        pp = d.get("principal_point_px")
        if pp is not None:
            d["principal_point_px"] = tuple(pp)
        return cls(**d)


def generate_specimen(seed: int, specimen_id: str | None = None) -> PhantomSpecimen:
    """Deterministically build a phantom: nested ellipsoids + surface landmarks.

    The phantom fits inside a ~40 mm radius ball so that every landmark
    projects inside the default detector at identity pose.
    """
    rng = np.random.default_rng([0x5EED, seed])
    if specimen_id is None:
        specimen_id = f"spec{seed:03d}"

    n_primitives = int(rng.integers(MIN_PRIMITIVES, MAX_PRIMITIVES + 1))
    primitives = []
    # One dominant body, remaining primitives scattered inside it.
    body = Ellipsoid(
        center=rng.uniform(-4.0, 4.0, 3),
        semi_axes=rng.uniform(28.0, 36.0, 3),
        density=rng.uniform(0.4, 0.8),
    )
    primitives.append(body)
    for _ in range(n_primitives - 1):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(0.0, 0.55) * body.semi_axes
        primitives.append(
            Ellipsoid(
                center=body.center + direction * radius,
                semi_axes=rng.uniform(3.0, 10.0, 3),
                density=rng.uniform(0.8, 2.5),
            )
        )

    n_landmarks = int(rng.integers(MIN_LANDMARKS, MIN_LANDMARKS + 5))
    points = np.empty((n_landmarks, 3))
    for i in range(n_landmarks):
        prim = primitives[int(rng.integers(0, len(primitives)))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        points[i] = prim.center + direction * prim.semi_axes
    names = tuple(f"lm{i}" for i in range(n_landmarks))
    return PhantomSpecimen(specimen_id, tuple(primitives), LandmarkSet(points, names))


def specimen_hash(spec: PhantomSpecimen) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _detector_rays(geom: ProjectionGeometry) -> np.ndarray:
    """Unit ray directions from the source through every pixel center, (H*W, 3)."""
    pitch_x, pitch_y = geom.pixel_pitch_mm
    pp_col, pp_row = geom.principal_point_px
    cols = (np.arange(geom.image_width_px) + 0.5 - pp_col) * pitch_x
    rows = (np.arange(geom.image_height_px) + 0.5 - pp_row) * pitch_y
    u, v = np.meshgrid(cols, rows)  # u: detector x, v: detector y
    d = np.stack(
        [u.ravel(), v.ravel(), np.full(u.size, geom.source_to_detector_mm)], axis=1
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _chord_lengths(
    origin: np.ndarray, directions: np.ndarray, ellipsoid: Ellipsoid
) -> np.ndarray:
    """Length of each ray's intersection with the ellipsoid, clipped to t >= 0."""
    u = (origin - ellipsoid.center) / ellipsoid.semi_axes
    v = directions / ellipsoid.semi_axes
    a = np.sum(v * v, axis=1)
    b = np.sum(u * v, axis=1)
    c = float(np.dot(u, u)) - 1.0
    disc = b * b - a * c
    hit = disc > 0
    chord = np.zeros(directions.shape[0])
    if np.any(hit):
        sqrt_disc = np.sqrt(disc[hit])
        t1 = (-b[hit] - sqrt_disc) / a[hit]
        t2 = (-b[hit] + sqrt_disc) / a[hit]
        chord[hit] = np.maximum(t2, 0.0) - np.maximum(t1, 0.0)
    return chord


def render_projection(
    spec: PhantomSpecimen,
    geom: ProjectionGeometry,
    pose: RigidTransform6DoF,
    normalize: bool = True,
) -> np.ndarray:
    """Render one projection of the posed specimen; float image in [0, 1].

    Raw pixel value is the sum over primitives of density x chord length of
    the source-to-pixel ray through the transformed ellipsoid; the image is
    then min-max normalized (an all-zero integral stays all-zero).
    """
    iso = np.array([0.0, 0.0, geom.source_to_axis_mm])
    rot = pose.matrix()
    # Pull the ray back into the anatomy frame (world = R p + t + iso).
    origin_a = rot.T @ (-pose.translation - iso)
    dirs_a = _detector_rays(geom) @ rot  # row-vector form of R^T d

    accum = np.zeros(dirs_a.shape[0])
    for ellipsoid in spec.primitives:
        accum += ellipsoid.density * _chord_lengths(origin_a, dirs_a, ellipsoid)
    image = accum.reshape(geom.image_height_px, geom.image_width_px)
    if normalize:
        image = normalize_intensity(image)
    return image


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; constant images map to all zeros."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise InvalidInputError("image contains non-finite values")
    lo = float(image.min())
    hi = float(image.max())
    if hi > lo:
        return (image - lo) / (hi - lo)
    return np.zeros_like(image)


def project_points(
    points: np.ndarray, geom: ProjectionGeometry, pose: RigidTransform6DoF
) -> np.ndarray:
    """Pinhole-project anatomy-frame points to pixel coordinates (col, row)."""
    iso = np.array([0.0, 0.0, geom.source_to_axis_mm])
    world = np.asarray(points) @ pose.matrix().T + pose.translation + iso
    if np.any(world[:, 2] <= 0):
        raise InvalidInputError("point at or behind the source cannot be projected")
    scale = geom.source_to_detector_mm / world[:, 2]
    u = world[:, 0] * scale
    v = world[:, 1] * scale
    pitch_x, pitch_y = geom.pixel_pitch_mm
    pp_col, pp_row = geom.principal_point_px
    return np.stack([u / pitch_x + pp_col, v / pitch_y + pp_row], axis=1)


def landmarks_in_detector(
    spec: PhantomSpecimen, geom: ProjectionGeometry, pose: RigidTransform6DoF
) -> bool:
    px = project_points(spec.landmarks.points, geom, pose)
    return bool(
        np.all(px[:, 0] >= 0)
        and np.all(px[:, 0] <= geom.image_width_px)
        and np.all(px[:, 1] >= 0)
        and np.all(px[:, 1] <= geom.image_height_px)
    )
