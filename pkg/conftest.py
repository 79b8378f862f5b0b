"""
Shared fixtures for the dfloc test suite
"""

import numpy as np
import pytest

from dfloc.field import MlpField, ModelConfig
from dfloc.synthenv import SceneGenConfig, generate_scenes


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training and trend experiments")


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_scene_config():
    """16-channel scenes on a 4x4 satellite grid."""
    return SceneGenConfig(sat_height=4, sat_width=4, ground_tokens=4, dim=16, n_landmarks=5,
                          signature_gain=2.0, count=6)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(dim=16, heads=4, embed_dim=4, hidden=16, orientation_hidden=8)


@pytest.fixture
def tiny_scenes(tiny_scene_config):
    return generate_scenes(tiny_scene_config, base_seed=3)


@pytest.fixture
def tiny_field(tiny_model_config):
    return MlpField.initialize(tiny_model_config, np.random.default_rng(0))


@pytest.fixture
def tiny_field_3dof(tiny_model_config):
    return MlpField.initialize(tiny_model_config, np.random.default_rng(0), orientation=True)
