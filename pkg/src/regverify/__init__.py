"""regverify: a quality-assurance pipeline for 2D/3D registration.

Synthesizes labeled X-ray/DRR pairs from parametric phantoms, trains a
cross-attention verifier that accepts or rejects a registration result,
explains predictions with Grad-CAM heatmaps and conformal prediction sets,
and serves the four assistance conditions to an operator review console.
"""

from .geometry import (
    LandmarkSet,
    RegistrationLabel,
    RigidTransform6DoF,
    apply_transform,
    classify,
    mtre,
    sample_offset,
)

__all__ = [
    "LandmarkSet",
    "RegistrationLabel",
    "RigidTransform6DoF",
    "apply_transform",
    "classify",
    "mtre",
    "sample_offset",
]
