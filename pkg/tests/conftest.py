import numpy as np
import pytest

from taskprune.nn.model import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    """Four patches of four pixels, two layers; small enough for hand oracles."""
    return build_model(
        patch_dim=4,
        num_patches=4,
        d=8,
        num_layers=2,
        num_heads=2,
        ffn_width=12,
        num_classes=3,
        seed=7,
    )


def make_patches(rng, batch, num_patches=4, patch_dim=4):
    return rng.normal(size=(batch, num_patches, patch_dim))
