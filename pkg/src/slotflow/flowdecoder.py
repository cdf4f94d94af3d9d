"""Decode slot grids into per-layer flow images and opacities, then composite.

One decoder stack is shared by both slots: each slot grid passes through
three windowed-attention stages interleaved with patch-expanding
upsampling (2x, 2x, then 4x) and a final 5x5 convolution emitting four
channels — three flow-RGB (sigmoid-bounded by default) plus one opacity
logit. Opacities are normalized across the two slots by a per-pixel
softmax and the composite flow is their convex combination.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ConfigError, DecoderConfig
from .layers import PatchExpand, SwinBlock, init_transformer_weights


@dataclass
class LayeredFlow:
    """Dual-layer flow reconstruction for one frame pair."""

    layer_flows: torch.Tensor  # (B, 2, 3, H, W)
    alphas: torch.Tensor  # (B, 2, 1, H, W), softmax-normalized across slots
    composite: torch.Tensor  # (B, 3, H, W)
    reference: int | None = None
    target: int | None = None


def normalize_alphas(logit_a: torch.Tensor, logit_b: torch.Tensor):
    """Per-pixel softmax over the two slots' opacity logits."""
    stacked = torch.stack([logit_a, logit_b], dim=0)
    alphas = stacked.softmax(dim=0)
    return alphas[0], alphas[1]


def compose(layer_flows: torch.Tensor, alphas: torch.Tensor) -> torch.Tensor:
    """Convex per-pixel combination: sum_s alpha_s * flow_s.

    ``layer_flows`` is (..., S, 3, H, W) and ``alphas`` (..., S, 1, H, W).
    """
    return (alphas * layer_flows).sum(dim=-4)


class FlowDecoder(nn.Module):
    """Shared per-slot decoder from (B, h, w, d) grids to full-resolution maps."""

    def __init__(self, dim: int, grid_hw: tuple[int, int], cfg: DecoderConfig | None = None,
                 upsample_total: int = 16):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.cfg = cfg
        n_stages = len(cfg.stage_depths)
        inter = 2 ** (n_stages - 1)  # 2x expansion between consecutive stages
        if dim % inter:
            raise ConfigError(f"decoder input dim {dim} must be divisible by {inter}")
        if upsample_total % inter or upsample_total < inter:
            raise ConfigError(
                f"cannot restore x{upsample_total} with {n_stages} decoder stages"
            )
        blocks: list[nn.Module] = []
        grid = grid_hw
        d = dim
        for idx, (depth, heads) in enumerate(zip(cfg.stage_depths, cfg.stage_heads)):
            if idx > 0:
                blocks.append(PatchExpand(d, d // 2, factor=2))
                d //= 2
                grid = (grid[0] * 2, grid[1] * 2)
            for blk in range(depth):
                blocks.append(
                    SwinBlock(d, grid, heads, cfg.window_size, shifted=blk % 2 == 1,
                              mlp_ratio=cfg.mlp_ratio)
                )
        remaining = upsample_total // inter
        blocks.append(PatchExpand(d, d, factor=remaining))
        grid = (grid[0] * remaining, grid[1] * remaining)
        self.blocks = nn.ModuleList(blocks)
        self.out_conv = nn.Conv2d(d, 4, cfg.out_kernel, padding=cfg.out_kernel // 2)
        self.out_hw = grid
        self.grid_hw = grid_hw
        self.apply(init_transformer_weights)

    def decode_slot(self, grid: torch.Tensor):
        """One slot grid -> (flow_rgb (B, 3, H, W), alpha_logit (B, 1, H, W))."""
        if grid.shape[1:3] != self.grid_hw:
            raise ValueError(f"expected grid {self.grid_hw}, got {tuple(grid.shape[1:3])}")
        x = grid
        for block in self.blocks:
            x = block(x)
        x = self.out_conv(x.permute(0, 3, 1, 2))
        flow_rgb, alpha_logit = x[:, :3], x[:, 3:]
        if self.cfg.flow_activation == "sigmoid":
            flow_rgb = torch.sigmoid(flow_rgb)
        return flow_rgb, alpha_logit

    def forward(self, slot_grids: torch.Tensor, reference: int | None = None,
                target: int | None = None) -> LayeredFlow:
        """Decode both slot grids (B, 2, h, w, d) and composite the flow."""
        B, S = slot_grids.shape[:2]
        flow_rgb, alpha_logit = self.decode_slot(slot_grids.reshape(B * S, *slot_grids.shape[2:]))
        flow_rgb = flow_rgb.reshape(B, S, *flow_rgb.shape[1:])
        alpha_logit = alpha_logit.reshape(B, S, *alpha_logit.shape[1:])
        alphas = alpha_logit.softmax(dim=1)
        composite = compose(flow_rgb, alphas)
        return LayeredFlow(flow_rgb, alphas, composite, reference, target)
