"""Two-slot iterative attention routing and slot-grid broadcasting.

The two slots are fixed learnable queries (no sampling). At every
iteration the attention logits are normalized over the *slot* axis so
the slots compete for pixels, then renormalized over pixels to form the
read weights that aggregate values; a shared GRU (plus an optional
residual MLP) refines the slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn.init import trunc_normal_

from .config import GroupingConfig


@dataclass
class SlotState:
    """Byproducts of one routing iteration, kept for inspection and oracles."""

    slots: torch.Tensor  # (B, 2, d) updated slots
    queries: torch.Tensor  # (B, 2, d)
    keys: torch.Tensor  # (B, P, d)
    values: torch.Tensor  # (B, P, d)
    logits: torch.Tensor  # (B, 2, P) scaled dot products
    slot_attn: torch.Tensor  # (B, 2, P) softmax over slots; columns sum to 1
    read_attn: torch.Tensor  # (B, 2, P) renormalized over pixels; rows sum to 1
    update: torch.Tensor  # (B, 2, d) read_attn @ values


class SlotRouter(nn.Module):
    """Iterative two-slot attention over a flattened feature grid."""

    def __init__(self, dim: int, cfg: GroupingConfig | None = None):
        super().__init__()
        cfg = cfg or GroupingConfig()
        self.cfg = cfg
        self.dim = dim
        self.slot_init = nn.Parameter(torch.zeros(2, dim))
        trunc_normal_(self.slot_init, std=0.02)
        self.norm_features = nn.LayerNorm(dim)
        self.norm_slots = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.gru = nn.GRUCell(dim, dim)
        if cfg.use_mlp:
            self.norm_mlp = nn.LayerNorm(dim)
            self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))

    def init_slots(self, batch_size: int) -> torch.Tensor:
        """The learnable slot pair, identical on every call."""
        return self.slot_init.unsqueeze(0).expand(batch_size, -1, -1)

    def slot_step(self, slots: torch.Tensor, features: torch.Tensor) -> SlotState:
        """One routing iteration; ``features`` are (B, P, d) tokens."""
        B, P, d = features.shape
        q = self.to_q(self.norm_slots(slots))
        k = self.to_k(features)
        v = self.to_v(features)
        logits = q @ k.transpose(1, 2) / math.sqrt(d)  # (B, 2, P)
        slot_attn = logits.softmax(dim=1)
        weights = slot_attn + self.cfg.eps
        read_attn = weights / weights.sum(dim=2, keepdim=True)
        update = read_attn @ v
        new_slots = self.gru(update.reshape(B * 2, d), slots.reshape(B * 2, d)).reshape(B, 2, d)
        if self.cfg.use_mlp:
            new_slots = new_slots + self.mlp(self.norm_mlp(new_slots))
        return SlotState(new_slots, q, k, v, logits, slot_attn, read_attn, update)

    def route(self, features: torch.Tensor, iterations: int | None = None):
        """Run N routing iterations; returns (slots, final slot assignment).

        ``features`` may be (B, h, w, d) or (B, P, d); the assignment is
        the last iteration's softmax-over-slots, shape (B, 2, P).
        """
        iterations = self.cfg.num_iterations if iterations is None else iterations
        if iterations < 1:
            raise ValueError(f"need at least one routing iteration, got {iterations}")
        if features.dim() == 4:
            B, h, w, d = features.shape
            features = features.reshape(B, h * w, d)
        features = self.norm_features(features)
        slots = self.init_slots(features.shape[0])
        state = None
        for _ in range(iterations):
            state = self.slot_step(slots, features)
            slots = state.slots
        return slots, state.slot_attn


class SlotBroadcast(nn.Module):
    """Tile each slot over the grid and add shared learnable position embeddings."""

    def __init__(self, dim: int, grid_hw: tuple[int, int]):
        super().__init__()
        h, w = grid_hw
        self.pos = nn.Parameter(torch.zeros(h, w, dim))
        trunc_normal_(self.pos, std=0.02)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        B, S, d = slots.shape
        h, w, _ = self.pos.shape
        grids = slots[:, :, None, None, :].expand(B, S, h, w, d)
        return grids + self.pos
