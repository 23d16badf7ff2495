"""Shared fixtures: tiny model configs and a small rendered dataset."""

import numpy as np
import pytest

from defectdet.anchors import AnchorGridConfig
from defectdet.config import ExperimentConfig, ModelConfig, TrainPlan
from defectdet.synthetic import SyntheticConfig, generate_synthetic_dataset


def make_rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def rng():
    return make_rng(0)


def tiny_experiment(**train_overrides):
    """A deliberately small detector for fast functional tests."""
    plan = dict(phase_iters=(4, 4, 2, 2), short_side=224, max_side=400)
    plan.update(train_overrides)
    return ExperimentConfig(
        model=ModelConfig(backbone_channels=(4, 6, 8, 8), rpn_hidden=8,
                          det_hidden=16),
        anchors=AnchorGridConfig(scales=(24.0, 40.0, 64.0),
                                 force_best_anchor_positive=True),
        train=TrainPlan(**plan),
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """11 train / 8 test images at 224 px, shared across the session."""
    cfg = SyntheticConfig(image_size=224, train_counts=(3, 3, 3, 2),
                          test_counts=(2, 2, 2, 2), min_object_size=16,
                          max_object_size=64, seed=7)
    out = tmp_path_factory.mktemp("smalldata")
    dataset, _ = generate_synthetic_dataset(cfg, out)
    return dataset
