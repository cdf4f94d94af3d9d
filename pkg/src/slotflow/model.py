"""The full pipeline tying encoder, comparator, routing and flow decoding."""

from __future__ import annotations

import torch
from torch import nn

from .comparator import FrameComparator
from .config import ModelConfig
from .encoder import ClipEncoder, FeatureVolume
from .flowdecoder import FlowDecoder, LayeredFlow
from .grouping import SlotBroadcast, SlotRouter


class ObjectDiscoveryModel(nn.Module):
    """RGB clip in, per-pair layered flow (and thus soft masks) out."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.clip_encoder = ClipEncoder(cfg.encoder, cfg.clip_len)
        dim = cfg.encoder.feature_dim
        grid_hw = self.clip_encoder.frame_encoder.grid_hw
        self.comparator = FrameComparator(dim, cfg.comparator)
        self.router = SlotRouter(dim, cfg.grouping)
        self.broadcast = SlotBroadcast(dim, grid_hw)
        enc = cfg.encoder
        total = enc.patch_size * 2 ** (len(enc.stage_channels) - 1)
        self.decoder = FlowDecoder(dim, grid_hw, cfg.decoder, upsample_total=total)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.clip_encoder.frame_encoder.grid_hw

    def encode_clip(self, frames: torch.Tensor) -> FeatureVolume:
        """(B, T, 3, H, W) -> per-frame and temporally fused feature grids."""
        return self.clip_encoder(frames)

    def decode_motion(self, motion_features: torch.Tensor,
                      reference: int | None = None, target: int | None = None) -> LayeredFlow:
        """Route motion features (P, h, w, d) into slots and decode the layers."""
        slots, _ = self.router.route(motion_features)
        grids = self.broadcast(slots)
        return self.decoder(grids, reference=reference, target=target)

    def reconstruct_pair(self, fused: torch.Tensor, reference: int, target: int) -> LayeredFlow:
        """Decode one (reference, target) pair from fused clip features (B, T, h, w, d)."""
        motion = self.comparator(fused[:, reference], fused[:, target])
        return self.decode_motion(motion, reference=reference, target=target)

    def reconstruct_pairs(self, fused: torch.Tensor, pairs: list[tuple[int, int, int]]) -> list[LayeredFlow]:
        """Decode many (clip_index, reference, target) pairs in one batched pass."""
        clip_idx = torch.tensor([p[0] for p in pairs], device=fused.device)
        refs = torch.tensor([p[1] for p in pairs], device=fused.device)
        tgts = torch.tensor([p[2] for p in pairs], device=fused.device)
        motion = self.comparator(fused[clip_idx, refs], fused[clip_idx, tgts])
        layered = self.decode_motion(motion)
        return [
            LayeredFlow(
                layer_flows=layered.layer_flows[p : p + 1],
                alphas=layered.alphas[p : p + 1],
                composite=layered.composite[p : p + 1],
                reference=int(refs[p]),
                target=int(tgts[p]),
            )
            for p in range(len(pairs))
        ]


def build_model(cfg: ModelConfig, seed: int | None = None) -> ObjectDiscoveryModel:
    """Construct a model, optionally under a fixed torch seed for replayability."""
    if seed is not None:
        torch.manual_seed(seed)
    return ObjectDiscoveryModel(cfg)
