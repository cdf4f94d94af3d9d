"""Frame-pair sampling and the relative-motion comparator.

For every reference frame the training policy draws one static pair
(i, i) and two distinct motion pairs (i, j), (i, k). The comparator
concatenates the two fused feature grids channel-wise and reduces them
back to d channels through two deformable convolutions and a stack of
standard transformer encoder blocks.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import deform_conv2d

from .config import ComparatorConfig
from .layers import init_transformer_weights, token_encoder_layer


def sample_pairs(num_frames: int, seed) -> list[tuple[int, int, int]]:
    """One (reference, target_j, target_k) triple per reference frame.

    ``seed`` may be anything accepted by ``np.random.default_rng``,
    including a SeedSequence for per-step stream derivation.
    """
    if num_frames < 3:
        raise ValueError(f"need at least 3 frames to draw two distinct motion targets, got {num_frames}")
    rng = np.random.default_rng(seed)
    triples = []
    for i in range(num_frames):
        others = [t for t in range(num_frames) if t != i]
        j, k = rng.choice(others, size=2, replace=False)
        triples.append((i, int(j), int(k)))
    return triples


class DeformableConv2d(nn.Module):
    """Modulated deformable 3x3 convolution with zero-initialized predictors.

    Offsets and modulation logits come from a parallel plain convolution
    whose weights and bias start at zero; modulation is 2*sigmoid(logit),
    so the first forward equals the underlying plain convolution exactly.
    ``plain_conv_fallback`` bypasses the deformable path entirely.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 plain_conv_fallback: bool = False):
        super().__init__()
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2
        self.fallback = plain_conv_fallback
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=self.padding)
        if not plain_conv_fallback:
            n_pred = 3 * kernel_size * kernel_size  # 2 offset + 1 modulation channel per tap
            self.offset_pred = nn.Conv2d(in_channels, n_pred, kernel_size, padding=self.padding)
            nn.init.zeros_(self.offset_pred.weight)
            nn.init.zeros_(self.offset_pred.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.fallback:
            return self.conv(x)
        k2 = self.kernel_size * self.kernel_size
        pred = self.offset_pred(x)
        offsets, modulation_logits = pred[:, : 2 * k2], pred[:, 2 * k2 :]
        modulation = 2.0 * torch.sigmoid(modulation_logits)
        return deform_conv2d(
            x, offsets, self.conv.weight, self.conv.bias,
            stride=1, padding=self.padding, mask=modulation,
        )

    def sample_at(self, x: torch.Tensor, offsets: torch.Tensor, modulation: torch.Tensor) -> torch.Tensor:
        """Deformable convolution with caller-supplied offsets/modulation."""
        return deform_conv2d(
            x, offsets, self.conv.weight, self.conv.bias,
            stride=1, padding=self.padding, mask=modulation,
        )


class FrameComparator(nn.Module):
    """Encode relative motion from two fused feature grids (B, h, w, d)."""

    def __init__(self, dim: int, cfg: ComparatorConfig):
        super().__init__()
        self.dim = dim
        self.deform1 = DeformableConv2d(2 * dim, 2 * dim, cfg.kernel_size, cfg.plain_conv_fallback)
        self.deform2 = DeformableConv2d(2 * dim, dim, cfg.kernel_size, cfg.plain_conv_fallback)
        self.blocks = nn.ModuleList(token_encoder_layer(dim, cfg.heads) for _ in range(cfg.depth))
        self.blocks.apply(init_transformer_weights)

    def forward(self, ref_features: torch.Tensor, tgt_features: torch.Tensor) -> torch.Tensor:
        if ref_features.shape != tgt_features.shape:
            raise ValueError(
                f"feature grids must share a shape, got {tuple(ref_features.shape)} vs {tuple(tgt_features.shape)}"
            )
        B, h, w, d = ref_features.shape
        x = torch.cat([ref_features, tgt_features], dim=-1).permute(0, 3, 1, 2)
        x = self.deform1(x)
        x = F.relu(x)
        x = self.deform2(x)
        tokens = x.permute(0, 2, 3, 1).reshape(B, h * w, d)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens.reshape(B, h, w, d)
