"""Self-supervised training loop: pair policy, schedules, checkpoints, logging.

Every step consumes, per clip, one static pair and two motion pairs per
reference frame. The learning rate ramps linearly over the warmup then
halves at each decay boundary; the consistency and entropy weights grow
by 5x at each boost boundary. All per-step randomness (clip choice, pair
sampling) derives from SeedSequence([seed, step]), so a resumed run
replays the exact loss sequence of an uninterrupted one.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dataio, synthdata
from .comparator import sample_pairs
from .config import ModelConfig
from .losses import LossReport, LossWeights, ReferencePairs, total_loss
from .model import ObjectDiscoveryModel

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["step", "recon", "cons", "entro", "total", "lr", "lambda_c", "lambda_e"]


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 2
    base_lr: float = 4e-5
    total_iters: int = 300_000
    warmup_iters: int = 1000
    decay_every: int = 100_000
    decay_factor: float = 0.5
    lambda_boost_every: int = 100_000
    lambda_boost: float = 5.0
    lambda_recon: float = 100.0
    lambda_entropy: float = 0.01
    lambda_consistency: float = 0.01
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    detach_static_target: bool = False
    seed: int = 0
    device: str = "cpu"
    log_every: int = 1
    checkpoint_every: int = 1000
    snapshot_every: int = 0

    def validate(self) -> None:
        if self.warmup_iters >= self.total_iters:
            raise ValueError("warmup_iters must be smaller than total_iters")
        if min(self.decay_factor, self.lambda_boost) <= 0:
            raise ValueError("schedule factors must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to base_lr over the warmup, then halve at each boundary."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_iters:
        return cfg.base_lr * step / cfg.warmup_iters
    decays = (step - cfg.warmup_iters) // cfg.decay_every
    return cfg.base_lr * cfg.decay_factor ** decays


def lambdas_at(step: int, cfg: TrainConfig) -> LossWeights:
    """Consistency/entropy weights grow by the boost factor every boundary."""
    if step < 0:
        raise ValueError("step must be >= 0")
    boost = cfg.lambda_boost ** (step // cfg.lambda_boost_every)
    return LossWeights(
        recon=cfg.lambda_recon,
        entropy=cfg.lambda_entropy * boost,
        consistency=cfg.lambda_consistency * boost,
    )


class TrainClip:
    """One training clip plus access to its colorized flow targets."""

    def __init__(self, frames: np.ndarray):
        self.frames = frames  # (T, H, W, 3) float32

    def flow_target(self, i: int, j: int) -> np.ndarray | None:
        raise NotImplementedError

    def motion_targets_available(self, i: int) -> list[int]:
        raise NotImplementedError


class SyntheticTrainClip(TrainClip):
    def __init__(self, clip: synthdata.SyntheticClip, max_mag: float | None):
        super().__init__(clip.frames)
        self.clip = clip
        self.max_mag = max_mag

    def flow_target(self, i, j):
        return dataio.colorize_flow(self.clip.gt_flow(i, j), max_mag=self.max_mag).astype(np.float32)

    def motion_targets_available(self, i):
        return [j for j in range(self.clip.num_frames) if j != i]


class DiskTrainClip(TrainClip):
    def __init__(self, seq: dataio.Sequence, start: int, frames: np.ndarray, max_mag: float | None):
        super().__init__(frames)
        self.seq = seq
        self.start = start
        self.max_mag = max_mag

    def flow_target(self, i, j):
        path = self.seq.flow_index.get((self.start + i, self.start + j))
        if path is None:
            return None
        flow = dataio.resize_flow(dataio.read_flo(path), self.frames.shape[1:3])
        return dataio.colorize_flow(flow, max_mag=self.max_mag).astype(np.float32)

    def motion_targets_available(self, i):
        T = self.frames.shape[0]
        return [
            j for j in range(T)
            if j != i and (self.start + i, self.start + j) in self.seq.flow_index
        ]


class SyntheticClipSource:
    """Samples from an in-memory synthetic corpus; every pair has a target.

    Targets are colorized with one shared magnitude scale (the corpus
    maximum) so saturation is comparable across pairs of different spans.
    """

    def __init__(self, clips: list[synthdata.SyntheticClip], fixed_scale: bool = True):
        if not clips:
            raise ValueError("empty clip corpus")
        self.clips = clips
        self.max_mag = max(c.max_flow_magnitude() for c in clips) if fixed_scale else None

    @property
    def clip_len(self) -> int:
        return self.clips[0].num_frames

    def sample(self, rng: np.random.Generator) -> TrainClip:
        return SyntheticTrainClip(self.clips[int(rng.integers(len(self.clips)))], self.max_mag)


class DiskClipSource:
    """Samples clips from exported sequence directories under a root."""

    def __init__(self, root: str | Path, clip_len: int, target_hw: tuple[int, int],
                 max_mag: float | None = None):
        root = Path(root)
        candidates = [p for p in sorted(root.iterdir()) if (p / "frames").is_dir()] if root.is_dir() else []
        if not candidates and (root / "frames").is_dir():
            candidates = [root]
        self.sequences = [dataio.load_sequence(p) for p in candidates]
        self.sequences = [s for s in self.sequences if len(s) >= clip_len]
        if not self.sequences:
            raise dataio.SequenceLoadError(f"no usable sequences of length >= {clip_len} under {root}")
        if all(not s.flow_index for s in self.sequences):
            raise dataio.SequenceLoadError(
                f"no flow targets found under {root}; training needs precomputed or synthetic flow"
            )
        self._clip_len = clip_len
        self.target_hw = target_hw
        self.max_mag = max_mag

    @property
    def clip_len(self) -> int:
        return self._clip_len

    def sample(self, rng: np.random.Generator) -> TrainClip:
        seq = self.sequences[int(rng.integers(len(self.sequences)))]
        start = int(rng.integers(len(seq) - self._clip_len + 1))
        clip = dataio.sample_clip(seq, start, self._clip_len, self.target_hw)
        return DiskTrainClip(seq, start, clip.frames, self.max_mag)


def _step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, stream]))


def _canonical(obj):
    """Rebuild containers with interned strings for reproducible pickling."""
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


class Trainer:
    """Single-writer optimization loop around an ObjectDiscoveryModel."""

    def __init__(self, model: ObjectDiscoveryModel, source, cfg: TrainConfig,
                 out_dir: str | Path | None = None):
        cfg.validate()
        self.model = model.to(cfg.device)
        self.source = source
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay
        )
        self.step = 0
        self._log_rows: list[list] = []

    # --- data ---

    def sample_batch(self, step: int) -> list[TrainClip]:
        rng = _step_rng(self.cfg.seed, step, 0)
        return [self.source.sample(rng) for _ in range(self.cfg.batch_size)]

    def _resolve_motion_target(self, clip: TrainClip, i: int, j: int, taken: set[int],
                               rng: np.random.Generator):
        target = clip.flow_target(i, j)
        if target is not None:
            return j, target
        options = [t for t in clip.motion_targets_available(i) if t not in taken]
        if not options:
            raise RuntimeError(
                f"no flow target available for any motion pair of reference frame {i}"
            )
        j2 = int(options[int(rng.integers(len(options)))])
        logger.info("flow target (%d, %d) missing; resampled target %d", i, j, j2)
        return j2, clip.flow_target(i, j2)

    # --- optimization ---

    def train_step(self, batch: list[TrainClip], step: int) -> LossReport:
        cfg = self.cfg
        rng = _step_rng(cfg.seed, step, 1)
        T = batch[0].frames.shape[0]
        device = cfg.device

        frames = torch.from_numpy(np.stack([c.frames for c in batch]))
        frames = frames.permute(0, 1, 4, 2, 3).contiguous().to(device)

        pair_index: list[tuple[int, int, int]] = []  # (clip, ref, tgt) incl. static
        group_meta: list[tuple[int, int, list[int], list[torch.Tensor]]] = []
        for b, clip in enumerate(batch):
            for (i, j, k) in sample_pairs(T, rng):
                taken: set[int] = set()
                targets: list[torch.Tensor] = []
                motion: list[int] = []
                for cand in (j, k):
                    jj, tgt = self._resolve_motion_target(clip, i, cand, taken, rng)
                    taken.add(jj)
                    motion.append(jj)
                    targets.append(torch.from_numpy(tgt).permute(2, 0, 1)[None].to(device))
                pair_index.append((b, i, i))
                pair_index.extend((b, i, jj) for jj in motion)
                group_meta.append((b, i, motion, targets))

        fv = self.model.encode_clip(frames)
        layered = self.model.reconstruct_pairs(fv.fused, pair_index)

        groups = []
        cursor = 0
        for (b, i, motion, targets) in group_meta:
            static = layered[cursor]
            motion_pairs = [layered[cursor + 1], layered[cursor + 2]]
            cursor += 3
            groups.append(ReferencePairs(static=static, motion=motion_pairs, targets=targets))

        weights = lambdas_at(step, cfg)
        loss, report = total_loss(groups, weights, detach_static_target=cfg.detach_static_target)
        for name, value in (("recon", report.recon), ("cons", report.cons), ("entro", report.entro)):
            if not math.isfinite(value):
                raise RuntimeError(f"non-finite {name} loss at step {step}")

        lr = lr_at(step, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        return report

    def run(self, num_iters: int | None = None) -> list[LossReport]:
        """Advance the loop; returns the per-step reports of this call."""
        cfg = self.cfg
        stop = cfg.total_iters if num_iters is None else min(cfg.total_iters, self.step + num_iters)
        reports = []
        while self.step < stop:
            step = self.step
            batch = self.sample_batch(step)
            report = self.train_step(batch, step)
            reports.append(report)
            self.step = step + 1
            if step % cfg.log_every == 0:
                weights = lambdas_at(step, cfg)
                self._log_rows.append([
                    step, report.recon, report.cons, report.entro, report.total,
                    lr_at(step, cfg), weights.consistency, weights.entropy,
                ])
            if self.out_dir is not None:
                if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save_checkpoint(self.out_dir / f"checkpoint_{self.step:07d}.pt")
                if cfg.snapshot_every and self.step % cfg.snapshot_every == 0:
                    self._write_snapshot(batch)
        if self.out_dir is not None:
            self.flush_log(self.out_dir / "train_log.csv")
        return reports

    def flush_log(self, path: str | Path) -> None:
        path = Path(path)
        new_file = not path.exists()
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(LOG_COLUMNS)
            writer.writerows(self._log_rows)
        self._log_rows = []

    def _write_snapshot(self, batch: list[TrainClip]) -> None:
        self.model.eval()
        with torch.no_grad():
            frames = torch.from_numpy(batch[0].frames[None]).permute(0, 1, 4, 2, 3)
            fv = self.model.encode_clip(frames.to(self.cfg.device))
            layered = self.model.reconstruct_pair(fv.fused, 0, min(1, frames.shape[1] - 1))
        self.model.train()
        snap_dir = self.out_dir / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for s in range(2):
            alpha = layered.alphas[0, s, 0].cpu().numpy()
            dataio.write_mask_png(alpha, snap_dir / f"step{self.step:07d}_slot{s}.png", soft=True)

    # --- checkpointing ---

    def save_checkpoint(self, path: str | Path) -> None:
        payload = {
            "version": CHECKPOINT_VERSION,
            "iteration": self.step,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "lr": lr_at(self.step, self.cfg),
            "lambdas": dataclasses.asdict(lambdas_at(self.step, self.cfg)),
            "model_config": dataclasses.asdict(self.model.cfg),
            "train_config": dataclasses.asdict(self.cfg),
        }
        # byte-stable serialization: intern strings so the pickle memo layout
        # does not depend on whether values came from a previous load, and
        # write through a buffer so the archive name is path-independent
        buffer = io.BytesIO()
        torch.save(_canonical(payload), buffer)
        Path(path).write_bytes(buffer.getvalue())

    def load_checkpoint(self, path: str | Path) -> int:
        payload = torch.load(path, map_location=self.cfg.device, weights_only=False)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {payload.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
            )
        own = self.model.state_dict()
        saved = payload["model"]
        for name in own:
            if name not in saved:
                raise CheckpointError(f"parameter {name!r} missing from checkpoint")
            if saved[name].shape != own[name].shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {tuple(saved[name].shape)} "
                    f"vs model shape {tuple(own[name].shape)}"
                )
        for name in saved:
            if name not in own:
                raise CheckpointError(f"checkpoint parameter {name!r} unknown to this model")
        self.model.load_state_dict(saved)
        self.optimizer.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["torch_rng"])
        self.step = int(payload["iteration"])
        return self.step
