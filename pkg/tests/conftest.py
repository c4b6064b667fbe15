from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msanet.backbone import BackboneConfig  # noqa: E402
from msanet.dataset import DatasetConfig, generate_synthetic_dataset  # noqa: E402
from msanet.model import ModelConfig, build_model  # noqa: E402
from msanet.tensor import float64_mode  # noqa: E402

TINY_BACKBONE = BackboneConfig(input_size=(32, 32), stem_stride=4, stem_channels=8, blocks=((8, 1), (8, 2), (8, 1)))
TINY_MODEL = ModelConfig(alpha=8, merged_channels=8, decoder_channels=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with float64_mode():
        yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 classes x 8 samples of 32x32 images."""
    root = tmp_path_factory.mktemp("small_data")
    return generate_synthetic_dataset(DatasetConfig(classes=8, samples_per_class=8, image_size=32, seed=5), root)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default 8 x 50 dataset of 64x64 images."""
    root = tmp_path_factory.mktemp("default_data")
    return generate_synthetic_dataset(DatasetConfig(), root)


@pytest.fixture
def tiny_model():
    return build_model(TINY_BACKBONE, TINY_MODEL)


@pytest.fixture
def tiny_model64():
    with float64_mode():
        return build_model(TINY_BACKBONE, TINY_MODEL)
