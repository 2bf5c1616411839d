"""Rigid 6DoF transforms, landmark mapping, and the mTRE accept/reject rule.

Conventions fixed here and relied on everywhere else:

* A transform maps *anatomy* coordinates: ``p_out = R @ p + t`` with ``R``
  the rotation matrix of the axis-angle vector ``rotation`` and ``t`` the
  translation in millimeters.
* Rotation vectors are canonical, i.e. their magnitude lies in ``[0, pi]``.
* A registration is ACCEPT iff its mTRE is *strictly* below the threshold
  (default 2.0 mm); exactly at the threshold is REJECT.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError

DEFAULT_THRESHOLD_MM = 2.0

# Default sampling ranges for registration offsets: +/-10 degrees and
# +/-10 mm per axis.  Wide enough that unconditioned draws are almost
# always rejected; the dataset generator rescales magnitudes to hit its
# target prevalence.
DEFAULT_ROT_BOUND_RAD = math.radians(10.0)
DEFAULT_TRANS_BOUND_MM = 10.0


class RegistrationLabel(str, enum.Enum):
    ACCEPT = "ACCEPT"
    REJECT = "REJECT"


def _canonical_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Wrap an axis-angle vector so its magnitude lies in [0, pi]."""
    angle = float(np.linalg.norm(rotvec))
    if angle <= math.pi:
        return rotvec
    axis = rotvec / angle
    angle = angle % (2.0 * math.pi)
    if angle > math.pi:
        angle -= 2.0 * math.pi  # negative angle flips the axis below
    return axis * angle


@dataclass(frozen=True)
class RigidTransform6DoF:
    """A rigid offset: axis-angle rotation (radians) plus translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidInputError("transform components must be finite")
        object.__setattr__(self, "rotation", _canonical_rotvec(rot))
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform6DoF":
        return cls(np.zeros(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix of the axis-angle vector."""
        return Rotation.from_rotvec(self.rotation).as_matrix()

    def compose(self, other: "RigidTransform6DoF") -> "RigidTransform6DoF":
        """Return the transform equivalent to applying ``other`` first, then self."""
        r_self = Rotation.from_rotvec(self.rotation)
        r_other = Rotation.from_rotvec(other.rotation)
        combined = r_self * r_other
        translation = r_self.apply(other.translation) + self.translation
        return RigidTransform6DoF(combined.as_rotvec(), translation)

    def inverse(self) -> "RigidTransform6DoF":
        r_inv = Rotation.from_rotvec(self.rotation).inv()
        return RigidTransform6DoF(r_inv.as_rotvec(), -r_inv.apply(self.translation))

    def to_dict(self) -> dict:
        return {
            "rotvec": [float(v) for v in self.rotation],
            "trans_mm": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RigidTransform6DoF":
        return cls(np.asarray(data["rotvec"]), np.asarray(data["trans_mm"]))

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(
            np.all(np.abs(self.rotation) <= tol)
            and np.all(np.abs(self.translation) <= tol)
        )


@dataclass(frozen=True)
class LandmarkSet:
    """Named 3D points (millimeters) attached to one specimen."""

    points: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InvalidInputError("landmarks must be a non-empty (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("landmark coordinates must be finite")
        if self.names is not None and len(self.names) != pts.shape[0]:
            raise InvalidInputError("names length must match number of points")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def apply_transform(t: RigidTransform6DoF, pts: LandmarkSet) -> LandmarkSet:
    """Map every landmark through ``R @ p + t``."""
    moved = pts.points @ t.matrix().T + t.translation
    return LandmarkSet(moved, pts.names)


def mtre(
    estimated_offset: RigidTransform6DoF,
    gt_offset: RigidTransform6DoF,
    landmarks: LandmarkSet,
) -> float:
    """Mean Target Registration Error in millimeters.

    Mean Euclidean distance, over the landmarks, between the points mapped
    by the estimated offset and by the ground-truth offset.
    """
    est = apply_transform(estimated_offset, landmarks).points
    ref = apply_transform(gt_offset, landmarks).points
    return float(np.mean(np.linalg.norm(est - ref, axis=1)))


def classify(
    mtre_value: float, threshold: float = DEFAULT_THRESHOLD_MM
) -> RegistrationLabel:
    """ACCEPT iff the error is strictly below the threshold."""
    if not math.isfinite(mtre_value) or mtre_value < 0:
        raise InvalidInputError(f"mTRE must be finite and non-negative, got {mtre_value}")
    if threshold <= 0:
        raise InvalidInputError(f"threshold must be positive, got {threshold}")
    return RegistrationLabel.ACCEPT if mtre_value < threshold else RegistrationLabel.REJECT


@dataclass(frozen=True)
class OffsetBounds:
    """Per-axis uniform sampling ranges: rotation radians, translation mm."""

    rot_min: np.ndarray = field(
        default_factory=lambda: np.full(3, -DEFAULT_ROT_BOUND_RAD)
    )
    rot_max: np.ndarray = field(
        default_factory=lambda: np.full(3, DEFAULT_ROT_BOUND_RAD)
    )
    trans_min: np.ndarray = field(
        default_factory=lambda: np.full(3, -DEFAULT_TRANS_BOUND_MM)
    )
    trans_max: np.ndarray = field(
        default_factory=lambda: np.full(3, DEFAULT_TRANS_BOUND_MM)
    )

    def __post_init__(self):
        for name in ("rot_min", "rot_max", "trans_min", "trans_max"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} must be finite")
            object.__setattr__(self, name, arr)
        if np.any(self.rot_min > self.rot_max) or np.any(self.trans_min > self.trans_max):
            raise InvalidInputError("inverted bounds: min must be <= max per axis")


def sample_offset(
    rng: np.random.Generator, bounds: OffsetBounds | None = None
) -> RigidTransform6DoF:
    """Draw each of the six components independently and uniformly."""
    if bounds is None:
        bounds = OffsetBounds()
    rot = rng.uniform(bounds.rot_min, bounds.rot_max)
    trans = rng.uniform(bounds.trans_min, bounds.trans_max)
    return RigidTransform6DoF(rot, trans)
