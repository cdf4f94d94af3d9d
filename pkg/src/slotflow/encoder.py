"""Per-frame hierarchical encoder and global temporal fusion.

Each frame passes through a three-stage windowed-attention pyramid that
downsamples by patch_size * 2^(stages-1) overall (16 under defaults);
the per-frame grids are then fused by full attention over all T*h*w
tokens after adding a learnable per-(frame, cell) positional table.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn.init import trunc_normal_

from .config import EncoderConfig
from .layers import PatchEmbed, PatchMerging, SwinBlock, init_transformer_weights, token_encoder_layer

# channel statistics applied to [0,1] inputs inside the encoder
_INPUT_MEAN = (0.485, 0.456, 0.406)
_INPUT_STD = (0.229, 0.224, 0.225)


@dataclass
class FeatureVolume:
    """Per-frame feature grids before and after temporal fusion."""

    per_frame: torch.Tensor  # (B, T, h, w, d)
    fused: torch.Tensor  # (B, T, h, w, d)


class FrameEncoder(nn.Module):
    """Shared spatial encoder mapping (B, 3, H, W) to an (B, h, w, d) grid."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        H, W = cfg.input_hw
        self.patch_embed = PatchEmbed(3, cfg.stage_channels[0], cfg.patch_size)
        grid = (H // cfg.patch_size, W // cfg.patch_size)
        stages: list[nn.Module] = []
        for idx, (dim, depth, heads) in enumerate(
            zip(cfg.stage_channels, cfg.stage_depths, cfg.stage_heads)
        ):
            if idx > 0:
                stages.append(PatchMerging(cfg.stage_channels[idx - 1]))
                grid = (grid[0] // 2, grid[1] // 2)
            for blk in range(depth):
                stages.append(
                    SwinBlock(dim, grid, heads, cfg.window_size, shifted=blk % 2 == 1,
                              mlp_ratio=cfg.mlp_ratio)
                )
        self.stages = nn.ModuleList(stages)
        self.norm = nn.LayerNorm(cfg.feature_dim)
        self.grid_hw = grid
        self.register_buffer("input_mean", torch.tensor(_INPUT_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("input_std", torch.tensor(_INPUT_STD).view(1, 3, 1, 1), persistent=False)
        self.apply(init_transformer_weights)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-2:] != tuple(self.cfg.input_hw):
            raise ValueError(f"expected frames of size {self.cfg.input_hw}, got {tuple(frames.shape[-2:])}")
        x = (frames - self.input_mean) / self.input_std
        x = self.patch_embed(x)
        for stage in self.stages:
            x = stage(x)
        return self.norm(x)


class TemporalFusion(nn.Module):
    """Global attention over all frames' tokens with learned (t, cell) encodings."""

    def __init__(self, dim: int, heads: int, depth: int, clip_len: int, grid_hw: tuple[int, int]):
        super().__init__()
        h, w = grid_hw
        self.pos = nn.Parameter(torch.zeros(clip_len, h, w, dim))
        trunc_normal_(self.pos, std=0.02)
        self.layers = nn.ModuleList(token_encoder_layer(dim, heads) for _ in range(depth))
        self.grid_hw = grid_hw

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        B, T, h, w, d = features.shape
        if (h, w) != self.grid_hw:
            raise ValueError(f"expected grid {self.grid_hw}, got {(h, w)}")
        if T > self.pos.shape[0]:
            raise ValueError(f"clip length {T} exceeds configured maximum {self.pos.shape[0]}")
        x = features + self.pos[:T]
        x = x.reshape(B, T * h * w, d)
        for layer in self.layers:
            x = layer(x)
        return x.reshape(B, T, h, w, d)


class ClipEncoder(nn.Module):
    """Frame encoder + temporal fusion over a whole clip."""

    def __init__(self, cfg: EncoderConfig, clip_len: int):
        super().__init__()
        self.frame_encoder = FrameEncoder(cfg)
        self.temporal = TemporalFusion(
            cfg.feature_dim, cfg.temporal_heads, cfg.temporal_depth, clip_len,
            self.frame_encoder.grid_hw,
        )

    def forward(self, clip: torch.Tensor) -> FeatureVolume:
        B, T = clip.shape[:2]
        per_frame = self.frame_encoder(clip.reshape(B * T, *clip.shape[2:]))
        per_frame = per_frame.reshape(B, T, *per_frame.shape[1:])
        fused = self.temporal(per_frame)
        return FeatureVolume(per_frame=per_frame, fused=fused)
