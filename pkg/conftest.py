"""Shared pytest fixtures."""
import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from microattnet import ModelConfig, miniature_config
from synthetic import SynthConfig, synth_generate


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale checks that take minutes")


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same draws."""
    return np.random.default_rng(1234)


@pytest.fixture
def textured_image(rng):
    """Smooth random texture in [0, 1], 64x64."""
    texture = gaussian_filter(rng.random((64, 64)), 2.0)
    texture -= texture.min()
    return texture / texture.max()


@pytest.fixture
def small_synth_config():
    return SynthConfig(per_class=2, frames_min=7, frames_max=8, side=64, subjects=5)


@pytest.fixture
def small_dataset(small_synth_config):
    """Ten dual-view sequences at 64 px per view."""
    return synth_generate(small_synth_config, seed=3)


@pytest.fixture
def mini_config() -> ModelConfig:
    return miniature_config()


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Geometry small enough to train for a few epochs inside a test."""
    return ModelConfig(input_side=8, c1=2, c2=4, head_hidden=8, se_reduction=2, dropout_conv=0.0,
                       dropout_head=0.0, precision="f64")
