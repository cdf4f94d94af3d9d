import numpy as np
import pytest
import torch

from slotflow import synthdata


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rectangle_clip():
    """16x16 flat rectangle translating (2, 0) px/frame on a static background."""
    sprite = synthdata.SpriteSpec(
        shape_kind="rectangle",
        size_px=(16, 16),
        start=(20.0, 24.0),
        velocity=(2.0, 0.0),
    )
    canvas = synthdata.CanvasConfig(height=48, width=64)
    return synthdata.generate_clip([sprite], canvas, num_frames=5, seed=3)
