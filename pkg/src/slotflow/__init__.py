"""Self-supervised moving-object segmentation from RGB clips.

A clip encoder fuses per-frame features over time; a frame comparator
builds relative-motion features for sampled frame pairs; two-slot
attention routing and a shared decoder reconstruct the pair's optical
flow as two layers whose opacities double as segmentation masks.
"""

from .config import (
    ComparatorConfig,
    ConfigError,
    DecoderConfig,
    EncoderConfig,
    GroupingConfig,
    ModelConfig,
    desk_model_config,
    model_config_from_preset,
    paper_model_config,
)
from .model import ObjectDiscoveryModel, build_model

__version__ = "0.1.0"

__all__ = [
    "ComparatorConfig",
    "ConfigError",
    "DecoderConfig",
    "EncoderConfig",
    "GroupingConfig",
    "ModelConfig",
    "ObjectDiscoveryModel",
    "build_model",
    "desk_model_config",
    "model_config_from_preset",
    "paper_model_config",
    "__version__",
]
