"""Shared fixtures for the test suite.

The expensive fixtures (synthetic datasets, trained models) are session
scoped so the suite stays fast; tests must treat them as read-only.
"""

import numpy as np
import pytest

from umc.data import DataConfig, NoiseSpec, gen_synthetic
from umc.model import PathwaySpec, UmcConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    """Eight 32x32 samples, sigma=25. Small enough to regenerate anywhere."""
    cfg = DataConfig(n_samples=8, height=32, width=32, n_classes=5,
                     n_categories=3, seed=7)
    return gen_synthetic(cfg, NoiseSpec(sigma=25.0, seed=7))


@pytest.fixture(scope="session")
def smoke_dataset():
    """The 50-sample 64x64 sigma=30 set used by the training smoke runs."""
    cfg = DataConfig(n_samples=50, height=64, width=64, n_classes=5,
                     n_categories=3, seed=11)
    return gen_synthetic(cfg, NoiseSpec(sigma=30.0, seed=11))


def tiny_config(connectivity="dense", upsample_mode="bilinear", n_classes=5):
    return UmcConfig(
        in_channels=3,
        filters=(4, 8, 16, 32, 64),
        pathways=(
            PathwaySpec("denoise", 3, "regression"),
            PathwaySpec("segment", n_classes, "classification"),
        ),
        connectivity=connectivity,
        upsample_mode=upsample_mode,
    )


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
