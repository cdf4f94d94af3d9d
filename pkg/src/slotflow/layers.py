"""Windowed-attention building blocks shared by the encoder and flow decoder.

Feature maps travel channel-last, (B, H, W, C). Window sizes are clamped to
the stage grid and divisibility is checked at construction, so there is no
runtime padding path. Attention is cosine-similarity with a learned,
clamped per-head logit scale; blocks are pre-norm with MLP ratio 4 and
alternate between plain and shifted windows.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.init import trunc_normal_

from .config import ConfigError


def window_partition(x: torch.Tensor, window: tuple[int, int]) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, wh * ww, C)."""
    B, H, W, C = x.shape
    wh, ww = window
    x = x.view(B, H // wh, wh, W // ww, ww, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, C)


def window_reverse(windows: torch.Tensor, window: tuple[int, int], hw: tuple[int, int]) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    H, W = hw
    wh, ww = window
    B = windows.shape[0] // ((H // wh) * (W // ww))
    x = windows.view(B, H // wh, W // ww, wh, ww, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


def _relative_position_index(window: tuple[int, int]) -> torch.Tensor:
    wh, ww = window
    coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij"))
    flat = coords.flatten(1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += wh - 1
    rel[:, :, 1] += ww - 1
    rel[:, :, 0] *= 2 * ww - 1
    return rel.sum(-1)


class WindowAttention(nn.Module):
    """Multi-head attention within non-overlapping windows.

    Queries and keys are unit-normalized; their dot product is scaled by a
    learned per-head factor clamped at 100. A learned relative-position
    bias table is added before the softmax.
    """

    def __init__(self, dim: int, window: tuple[int, int], num_heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.full((num_heads, 1, 1), math.log(10.0)))
        wh, ww = window
        self.relative_bias = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), num_heads))
        trunc_normal_(self.relative_bias, std=0.02)
        self.register_buffer("rel_index", _relative_position_index(window), persistent=False)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # (Bw, heads, N, hd)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        scale = torch.clamp(self.logit_scale, max=math.log(100.0)).exp()
        attn = (q @ k.transpose(-2, -1)) * scale
        bias = self.relative_bias[self.rel_index.view(-1)].view(N, N, -1)
        attn = attn + bias.permute(2, 0, 1)
        if attn_mask is not None:
            nW = attn_mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.num_heads, N, N) + attn_mask[:, None]
            attn = attn.view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _shift_attn_mask(hw: tuple[int, int], window: tuple[int, int], shift: tuple[int, int]) -> torch.Tensor:
    """Additive mask hiding cross-boundary pairs inside shifted windows."""
    H, W = hw
    wh, ww = window
    sh, sw = shift

    def spans(length, win, s):
        if s == 0:
            return (slice(0, length),)
        return (slice(0, length - win), slice(length - win, length - s), slice(length - s, length))

    img = torch.zeros(1, H, W, 1)
    region = 0
    for hs in spans(H, wh, sh):
        for ws_ in spans(W, ww, sw):
            img[:, hs, ws_, :] = region
            region += 1
    windows = window_partition(img, window).squeeze(-1)  # (nW, wh*ww)
    different = windows[:, None, :] != windows[:, :, None]
    return torch.zeros_like(different, dtype=img.dtype).masked_fill(different, -100.0)


class SwinBlock(nn.Module):
    """Pre-norm windowed attention + MLP, optionally with shifted windows."""

    def __init__(self, dim: int, grid_hw: tuple[int, int], num_heads: int,
                 window_size: int, shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        H, W = grid_hw
        wh, ww = min(window_size, H), min(window_size, W)
        if H % wh or W % ww:
            raise ConfigError(
                f"grid {grid_hw} not divisible by window {(wh, ww)} (window_size={window_size})"
            )
        self.grid_hw = grid_hw
        self.window = (wh, ww)
        # no shift along a dimension fully covered by one window
        sh = wh // 2 if (shifted and H > wh) else 0
        sw = ww // 2 if (shifted and W > ww) else 0
        self.shift = (sh, sw)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, self.window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if sh or sw:
            self.register_buffer("attn_mask", _shift_attn_mask(grid_hw, self.window, self.shift),
                                 persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if (H, W) != self.grid_hw:
            raise ValueError(f"expected grid {self.grid_hw}, got {(H, W)}")
        shortcut = x
        x = self.norm1(x)
        sh, sw = self.shift
        if sh or sw:
            x = torch.roll(x, shifts=(-sh, -sw), dims=(1, 2))
        windows = window_partition(x, self.window)
        windows = self.attn(windows, self.attn_mask)
        x = window_reverse(windows, self.window, (H, W))
        if sh or sw:
            x = torch.roll(x, shifts=(sh, sw), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection, (B, 3, H, W) -> (B, H/p, W/p, C)."""

    def __init__(self, in_channels: int, dim: int, patch_size: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.proj(x).permute(0, 2, 3, 1)
        return self.norm(x)


class PatchMerging(nn.Module):
    """2x2 neighborhood concat + linear reduction to double the channels."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"grid {(H, W)} not divisible by 2 for merging")
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1
        )
        return self.reduction(self.norm(x))


class PatchExpand(nn.Module):
    """Linear channel-to-space rearrangement upsampling by ``factor``."""

    def __init__(self, dim: int, out_dim: int, factor: int = 2):
        super().__init__()
        self.factor = factor
        self.out_dim = out_dim
        self.expand = nn.Linear(dim, factor * factor * out_dim, bias=False)
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, _ = x.shape
        f = self.factor
        x = self.expand(x).view(B, H, W, f, f, self.out_dim)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, H * f, W * f, self.out_dim)
        return self.norm(x)


def token_encoder_layer(dim: int, heads: int, mlp_ratio: float = 4.0) -> nn.TransformerEncoderLayer:
    """A standard transformer encoder layer on flat token sequences."""
    return nn.TransformerEncoderLayer(
        d_model=dim, nhead=heads, dim_feedforward=int(dim * mlp_ratio),
        dropout=0.0, batch_first=True,
    )


def init_transformer_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
