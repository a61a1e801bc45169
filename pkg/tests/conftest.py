import sys
from pathlib import Path

import numpy as np
import pytest

from padl.model import PADL, ModelConfig

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    # 16x16 images, 16 patches: fast enough for per-test forward/backward passes
    return ModelConfig(image_height=16, image_width=16, patch_size=4, token_dim=32, heads=2, head_dim=16, depth=1,
                       mlp_head_hidden=16)


@pytest.fixture
def tiny_model(tiny_config):
    return PADL(tiny_config, seed=0)


@pytest.fixture
def toy_batch(rng):
    from padl.manipulator import make_toy_images

    return make_toy_images(4, rng, 16, 16)
