"""Model configuration dataclasses and the two named presets.

``paper`` mirrors the published full-scale architecture (T=7 clips at
192x384, three encoder stages ending at 384 channels); ``desk`` is a
miniature that trains on a single CPU/commodity GPU.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent configuration, raised at construction time."""


@dataclass
class EncoderConfig:
    patch_size: int = 4
    stage_channels: list[int] = field(default_factory=lambda: [96, 192, 384])
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 6])
    stage_heads: list[int] = field(default_factory=lambda: [3, 6, 12])
    window_size: int = 12
    temporal_heads: int = 8
    temporal_depth: int = 1
    input_hw: tuple[int, int] = (192, 384)
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if not (len(self.stage_channels) == len(self.stage_depths) == len(self.stage_heads)):
            raise ConfigError(
                "stage_channels, stage_depths and stage_heads must have equal length, got "
                f"{len(self.stage_channels)}/{len(self.stage_depths)}/{len(self.stage_heads)}"
            )
        h, w = self.input_hw
        div = self.patch_size * 2 ** (len(self.stage_channels) - 1)
        if h % div or w % div:
            raise ConfigError(f"input_hw {self.input_hw} must be divisible by {div}")
        for c, heads in zip(self.stage_channels, self.stage_heads):
            if c % heads:
                raise ConfigError(f"stage channels {c} not divisible by heads {heads}")

    @property
    def grid_hw(self) -> tuple[int, int]:
        div = self.patch_size * 2 ** (len(self.stage_channels) - 1)
        return self.input_hw[0] // div, self.input_hw[1] // div

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]


@dataclass
class ComparatorConfig:
    heads: int = 8
    depth: int = 3
    kernel_size: int = 3
    plain_conv_fallback: bool = False


@dataclass
class GroupingConfig:
    num_iterations: int = 5
    use_mlp: bool = True
    eps: float = 1e-8


@dataclass
class DecoderConfig:
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 2])
    stage_heads: list[int] = field(default_factory=lambda: [12, 6, 3])
    window_size: int = 12
    mlp_ratio: float = 4.0
    out_kernel: int = 5
    flow_activation: str = "sigmoid"  # or "linear"


@dataclass
class ModelConfig:
    clip_len: int = 7
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    comparator: ComparatorConfig = field(default_factory=ComparatorConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        self.encoder.validate()
        if self.clip_len < 1:
            raise ConfigError(f"clip_len must be >= 1, got {self.clip_len}")
        if len(self.decoder.stage_depths) != len(self.decoder.stage_heads):
            raise ConfigError("decoder stage_depths and stage_heads must have equal length")
        if self.decoder.flow_activation not in ("sigmoid", "linear"):
            raise ConfigError(f"unknown flow_activation {self.decoder.flow_activation!r}")


def paper_model_config() -> ModelConfig:
    return ModelConfig()


def desk_model_config() -> ModelConfig:
    return ModelConfig(
        clip_len=5,
        encoder=EncoderConfig(
            stage_channels=[32, 64, 128],
            stage_depths=[2, 2, 2],
            stage_heads=[2, 4, 8],
            window_size=6,
            temporal_heads=4,
            input_hw=(96, 192),
        ),
        comparator=ComparatorConfig(heads=4, depth=2),
        grouping=GroupingConfig(num_iterations=3),
        decoder=DecoderConfig(stage_depths=[1, 1, 1], stage_heads=[8, 4, 2], window_size=6),
    )


PRESETS = {
    "paper": paper_model_config,
    "desk": desk_model_config,
}


def model_config_from_preset(name: str) -> ModelConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = factory()
    cfg.validate()
    return cfg


def _apply_overrides(obj, overrides: dict, prefix: str = ""):
    for key, value in overrides.items():
        if not dataclasses.is_dataclass(obj) or key not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix + key!r} expects a mapping")
            _apply_overrides(current, value, prefix=f"{prefix}{key}.")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)


def model_config_from_dict(d: dict) -> ModelConfig:
    """Rebuild a ModelConfig from its asdict() form (e.g. out of a checkpoint)."""
    enc = dict(d.get("encoder", {}))
    if "input_hw" in enc:
        enc["input_hw"] = tuple(enc["input_hw"])
    cfg = ModelConfig(
        clip_len=d.get("clip_len", 7),
        encoder=EncoderConfig(**enc),
        comparator=ComparatorConfig(**d.get("comparator", {})),
        grouping=GroupingConfig(**d.get("grouping", {})),
        decoder=DecoderConfig(**d.get("decoder", {})),
    )
    cfg.validate()
    return cfg


def load_config_file(path: str | Path):
    """Read a versioned JSON config file.

    Layout: ``{"version": 1, "preset": "desk", "model": {...}, "train": {...}}``.
    ``model`` overrides are applied on top of the preset; ``train`` overrides
    are returned as a dict for the trainer to consume. Unknown keys raise
    ConfigError naming the key.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} unsupported (expected {CONFIG_VERSION})")
    preset = raw.pop("preset", "desk")
    model_cfg = model_config_from_preset(preset)
    _apply_overrides(model_cfg, raw.pop("model", {}), prefix="model.")
    train_overrides = raw.pop("train", {})
    if not isinstance(train_overrides, dict):
        raise ConfigError("config key 'train' expects a mapping")
    if raw:
        raise ConfigError(f"unknown config key {next(iter(raw))!r}")
    model_cfg.validate()
    return model_cfg, train_overrides
