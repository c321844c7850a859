import numpy as np
import pytest

from fscil.backbone import Backbone, ViTConfig
from fscil.optim import ParamStore
from fscil.prompts import PromptState


TINY = dict(
    image_size=(4, 8),
    channels=1,
    patch_size=4,
    embed_dim=8,
    num_heads=2,
    depth=2,
    mlp_ratio=2.0,
    prefix_len=1,
    tuned_layers=1,
)


@pytest.fixture
def tiny_config():
    return ViTConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    """(store, backbone, prompts) on the smallest interesting config."""
    rng = np.random.Generator(np.random.PCG64(7))
    store = ParamStore()
    backbone = Backbone(tiny_config, store, rng)
    prompts = PromptState(tiny_config, store, rng)
    return store, backbone, prompts


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
