"""Mask prediction, sliding-window ensembling and Jaccard evaluation.

A window prediction decodes, for every reference frame, the opacities
against a configured set of target frames (all other frames by default),
picks the foreground slot once per window, and averages the foreground
opacities over targets. Sequences are ensembled with stride-1 windows by
averaging soft masks, then binarized.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .model import ObjectDiscoveryModel

logger = logging.getLogger(__name__)


@dataclass
class InferenceConfig:
    threshold: float = 0.5
    target_offsets: list[int] | None = None  # None = all j != i in the window
    foreground_tie_eps: float = 1e-6


@dataclass
class MaskTrack:
    """Per-frame soft and binarized masks with ensemble provenance."""

    soft: np.ndarray  # (N, H, W) float32 in [0, 1]
    binary: np.ndarray  # (N, H, W) bool
    counts: np.ndarray  # (N,) how many window/pair predictions were averaged
    threshold: float = 0.5


def select_foreground_slot(alphas: np.ndarray, layer_flows: np.ndarray,
                           tie_eps: float = 1e-6) -> int:
    """Pick the object slot for a window of pair predictions.

    ``alphas`` is (P, 2, H, W), ``layer_flows`` (P, 2, 3, H, W). The slot
    with the smaller mean opacity area is the foreground; near-ties go to
    the slot whose flow layer varies more across the window.
    """
    areas = alphas.mean(axis=(0, 2, 3))
    if abs(areas[0] - areas[1]) > tie_eps:
        return int(np.argmin(areas))
    variances = layer_flows.reshape(layer_flows.shape[0], 2, -1).var(axis=(0, 2))
    return int(np.argmax(variances))


def predict_window(model: ObjectDiscoveryModel, frames: np.ndarray,
                   cfg: InferenceConfig | None = None):
    """Soft foreground masks for one window of T frames.

    Returns (soft (T, H, W) float32, valid (T,) bool); a frame is invalid
    when the configured offsets leave it without any target.
    """
    cfg = cfg or InferenceConfig()
    T = frames.shape[0]
    pairs = []
    for i in range(T):
        if cfg.target_offsets is None:
            targets = [j for j in range(T) if j != i]
        else:
            targets = [i + o for o in cfg.target_offsets if 0 <= i + o < T and o != 0]
        pairs.extend((0, i, j) for j in targets)
    if not pairs:
        raise ValueError("no frame pairs to decode; check target_offsets")

    was_training = model.training
    model.eval()
    with torch.no_grad():
        clip = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)[None]
        clip = clip.to(next(model.parameters()).device, next(model.parameters()).dtype)
        fv = model.encode_clip(clip)
        layered = model.reconstruct_pairs(fv.fused, pairs)
    if was_training:
        model.train()

    alphas = np.stack([lf.alphas[0, :, 0].cpu().numpy() for lf in layered])  # (P, 2, H, W)
    flows = np.stack([lf.layer_flows[0].cpu().numpy() for lf in layered])  # (P, 2, 3, H, W)
    fg = select_foreground_slot(alphas, flows, cfg.foreground_tie_eps)

    H, W = alphas.shape[-2:]
    soft = np.zeros((T, H, W), dtype=np.float32)
    valid = np.zeros(T, dtype=bool)
    for i in range(T):
        rows = [p for p, (_, ref, _) in enumerate(pairs) if ref == i]
        if rows:
            soft[i] = alphas[rows, fg].mean(axis=0)
            valid[i] = True
    return soft, valid


def ensemble_sequence(model: ObjectDiscoveryModel, frames: np.ndarray, clip_len: int,
                      cfg: InferenceConfig | None = None) -> MaskTrack:
    """Average soft masks over all stride-1 windows containing each frame."""
    cfg = cfg or InferenceConfig()
    N = frames.shape[0]
    H, W = frames.shape[1:3]
    acc = np.zeros((N, H, W), dtype=np.float64)
    counts = np.zeros(N, dtype=np.int64)

    if N < clip_len:
        logger.warning("sequence of %d frames shorter than window %d; padding by edge replication",
                       N, clip_len)
        padded = np.concatenate([frames, np.repeat(frames[-1:], clip_len - N, axis=0)])
        soft, valid = predict_window(model, padded, cfg)
        for t in range(N):
            if valid[t]:
                acc[t] += soft[t]
                counts[t] += 1
    else:
        for start in range(N - clip_len + 1):
            soft, valid = predict_window(model, frames[start : start + clip_len], cfg)
            for t in range(clip_len):
                if valid[t]:
                    acc[start + t] += soft[t]
                    counts[start + t] += 1

    soft = (acc / np.maximum(counts, 1)[:, None, None]).astype(np.float32)
    return MaskTrack(soft=soft, binary=soft >= cfg.threshold, counts=counts, threshold=cfg.threshold)


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class SequenceScores:
    per_frame: dict[int, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_frame.values())))

    @property
    def num_frames(self) -> int:
        return len(self.per_frame)


@dataclass
class EvalReport:
    """Per-sequence means plus the frame-weighted overall mean."""

    sequences: dict[str, SequenceScores] = field(default_factory=dict)

    @property
    def total_frames(self) -> int:
        return sum(s.num_frames for s in self.sequences.values())

    @property
    def frame_average(self) -> float:
        scores = [j for s in self.sequences.values() for j in s.per_frame.values()]
        return float(np.mean(scores))

    def format_table(self, score_label: str = "J (mean)") -> str:
        name_width = max([len(n) for n in self.sequences] + [len("frame avg.")]) + 2
        lines = [f"{'sequence':<{name_width}}{score_label}"]
        lines.append("-" * (name_width + len(score_label)))
        for name, scores in self.sequences.items():
            lines.append(f"{name:<{name_width}}{scores.mean * 100:.1f}")
        lines.append("-" * (name_width + len(score_label)))
        lines.append(f"{'frame avg.':<{name_width}}{self.frame_average * 100:.1f}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["sequence", "frames", "j_mean"])
            for name, scores in self.sequences.items():
                writer.writerow([name, scores.num_frames, f"{scores.mean:.6f}"])
            writer.writerow(["frame avg.", self.total_frames, f"{self.frame_average:.6f}"])


def evaluate(gt_masks: dict[str, dict[int, np.ndarray]],
             predictions: dict[str, MaskTrack]) -> EvalReport:
    """Score predictions against (possibly sparse) annotations.

    ``gt_masks`` maps sequence name to {frame index: labeled or binary
    mask}; multi-object labels are merged to a single foreground first.
    """
    report = EvalReport()
    for name, frames in gt_masks.items():
        if name not in predictions:
            raise KeyError(f"no predictions for sequence {name!r}")
        track = predictions[name]
        per_frame = {}
        for idx, gt in frames.items():
            if idx >= len(track.binary):
                raise IndexError(f"annotation for frame {idx} beyond track of {len(track.binary)}")
            per_frame[idx] = jaccard(track.binary[idx], dataio.merge_annotations(gt))
        if per_frame:
            report.sequences[name] = SequenceScores(per_frame)
    if not report.sequences:
        raise ValueError("no annotated frames to evaluate")
    return report


def write_mask_track(track: MaskTrack, out_dir: str | Path, save_soft: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(len(track.binary)):
        dataio.write_mask_png(track.binary[t], out / f"{t:05d}.png")
        if save_soft:
            dataio.write_mask_png(track.soft[t], out / f"{t:05d}_soft.png", soft=True)
