import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from regverify.dataset import DatasetConfig, build_dataset, load_manifest
from regverify.phantom import ProjectionGeometry

TOY_GEOMETRY = ProjectionGeometry(image_width_px=32, image_height_px=32)


def toy_dataset_config(**overrides) -> DatasetConfig:
    """Separable desk-scale dataset: identity offsets vs far-off offsets."""
    defaults = dict(
        n_specimens=3,
        projections_per_specimen=6,
        samples_per_projection=8,
        seed=11,
        geometry=TOY_GEOMETRY,
        target_prevalence=0.5,
        prevalence_tolerance=0.15,
        separable=True,
        separable_reject_factor=10.0,
    )
    defaults.update(overrides)
    return DatasetConfig(**defaults)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_dataset")
    build_dataset(toy_dataset_config(), root)
    return load_manifest(root)
