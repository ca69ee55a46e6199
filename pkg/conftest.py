"""
FlowAug - Shared Test Fixtures
"""

import os

os.environ.setdefault("FLOWAUG_ENV", "testing")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from config import RunConfig  # noqa: E402
from engine.rng import SeededRng  # noqa: E402
from services.dataset_service import DatasetService, SyntheticSeismoConfig  # noqa: E402


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def run_config():
    return RunConfig.defaults("testing")


@pytest.fixture(scope="session")
def tiny_dataset():
    """120 images of 8x8 with the default class ratios (84 / 26 / 10)."""
    config = SyntheticSeismoConfig(image_size=8, n_images=120, seed=7)
    return DatasetService().generate_synthetic_dataset(config)


@pytest.fixture
def random_images(rng):
    def make(n, size=8, channels=1):
        return np.floor(rng.child("images", n).random((n, size, size, channels)) * 256) / 256

    return make
