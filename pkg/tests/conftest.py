import numpy as np
import pytest

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from app.config import ViTConfig
from app.vit import init_weights


@pytest.fixture(name="tiny_config")
def tiny_config_fixture():
    """8x8 images, 4x4 patches, two blocks: small enough for finite differences"""
    return ViTConfig(image_side=8, channels=3, patch_side=4, depth=2, heads=2, embed_dim=8,
                     mlp_hidden_dim=16, num_classes=4)


@pytest.fixture(name="tiny_weights")
def tiny_weights_fixture(tiny_config):
    return init_weights(tiny_config, np.random.default_rng(0))


@pytest.fixture(name="tiny_images")
def tiny_images_fixture(tiny_config):
    rng = np.random.default_rng(5)
    return rng.uniform(0.05, 0.95, size=(6, tiny_config.channels, tiny_config.image_side, tiny_config.image_side))
