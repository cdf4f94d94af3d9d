"""Command-line entry point: synth, train, infer, eval, tta, visualize.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every
failure prints a single ``error: ...`` line to stderr. Commands never
mutate their inputs; outputs go under the requested output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataio, inference, synthdata, tta
from .config import ConfigError, load_config_file, model_config_from_dict, model_config_from_preset
from .model import build_model
from .trainer import CheckpointError, DiskClipSource, TrainConfig, Trainer

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, synthdata.SpriteSpecError, FileNotFoundError, json.JSONDecodeError)


def _default_synth_spec() -> dict:
    return {
        "canvas": {"height": 96, "width": 192},
        "frames": 7,
        "sprites": [synthdata.sprite_to_dict(synthdata.SpriteSpec(
            shape_kind="rectangle", size_px=(20, 20), start=(40.0, 40.0), velocity=(2.5, 1.0),
        ))],
    }


def _load_model_from_checkpoint(path: str, device: str = "cpu"):
    payload = torch.load(path, map_location=device, weights_only=False)
    cfg = model_config_from_dict(payload["model_config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, payload


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / "frames").is_dir():
        return [root]
    dirs = [p for p in sorted(root.iterdir()) if (p / "frames").is_dir()]
    if not dirs:
        raise FileNotFoundError(f"no sequence directories (with frames/) under {root}")
    return dirs


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.spec is not None:
        raw = json.loads(Path(args.spec).read_text())
        clip_specs = raw.get("clips", [raw])
    elif args.random_clips:
        clip_specs = None
    else:
        clip_specs = [_default_synth_spec()]

    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "clips": []}
    max_mag = 0.0
    if clip_specs is None:
        canvas = synthdata.CanvasConfig()
        clips = synthdata.random_corpus(args.random_clips, canvas, args.frames, seed=args.seed)
        for idx, clip in enumerate(clips):
            clip_dir = synthdata.export_clip(clip, out / f"clip_{idx:05d}")
            max_mag = max(max_mag, clip.max_flow_magnitude())
            manifest["clips"].append(clip_dir.name)
    else:
        for idx, spec in enumerate(clip_specs):
            sprites = [synthdata.sprite_from_dict(s) for s in spec.get("sprites", [])]
            if not sprites:
                raise synthdata.SpriteSpecError("spec contains no sprites")
            canvas = synthdata.canvas_from_dict(spec.get("canvas", {}))
            frames = int(spec.get("frames", args.frames))
            clip = synthdata.generate_clip(sprites, canvas, frames, seed=args.seed + idx)
            target = out / f"clip_{idx:05d}" if len(clip_specs) > 1 else out
            synthdata.export_clip(clip, target)
            max_mag = max(max_mag, clip.max_flow_magnitude())
            manifest["clips"].append(target.name)
    manifest["max_flow_magnitude"] = max_mag
    (out / "corpus_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(out)
    return 0


def cmd_train(args) -> int:
    if args.config is not None:
        model_cfg, train_overrides = load_config_file(args.config)
    else:
        model_cfg, train_overrides = model_config_from_preset(args.preset), {}
    train_cfg = TrainConfig(seed=args.seed)
    if args.preset == "desk" and args.config is None:
        train_cfg.total_iters = 10_000
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in train_overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key train.{key!r}")
        setattr(train_cfg, key, value)
    if args.iters is not None:
        train_cfg.total_iters = args.iters
        # short smoke runs keep the invariant warmup < total
        train_cfg.warmup_iters = min(train_cfg.warmup_iters, train_cfg.total_iters - 1)
    train_cfg.validate()

    data_root = Path(args.data)
    max_mag = None
    corpus_manifest = data_root / "corpus_manifest.json"
    if corpus_manifest.exists():
        max_mag = json.loads(corpus_manifest.read_text()).get("max_flow_magnitude")
    source = DiskClipSource(data_root, model_cfg.clip_len, model_cfg.encoder.input_hw, max_mag=max_mag)

    model = build_model(model_cfg, seed=train_cfg.seed)
    trainer = Trainer(model, source, train_cfg, out_dir=args.out)
    if args.resume is not None:
        trainer.load_checkpoint(args.resume)
        print(f"resumed at iteration {trainer.step}")
    trainer.run()
    final = Path(args.out) / f"checkpoint_{trainer.step:07d}.pt"
    trainer.save_checkpoint(final)
    trainer.flush_log(Path(args.out) / "train_log.csv")
    print(final)
    return 0


def cmd_infer(args) -> int:
    model, model_cfg, _ = _load_model_from_checkpoint(args.checkpoint)
    cfg = inference.InferenceConfig(threshold=args.threshold)
    out = Path(args.out)
    for seq_dir in _sequence_dirs(Path(args.data)):
        seq = dataio.load_sequence(seq_dir)
        frames = np.stack([dataio.load_frame(p, model_cfg.encoder.input_hw) for p in seq.frame_paths])
        track = inference.ensemble_sequence(model, frames, model_cfg.clip_len, cfg)
        inference.write_mask_track(track, out / seq.name, save_soft=args.save_soft)
        print(f"{seq.name}: {len(track.binary)} masks")
    return 0


def _load_gt_masks(data_root: Path, target_hw=None) -> dict[str, dict[int, np.ndarray]]:
    gt: dict[str, dict[int, np.ndarray]] = {}
    for seq_dir in _sequence_dirs(data_root):
        seq = dataio.load_sequence(seq_dir)
        if seq.mask_paths:
            gt[seq.name] = {
                idx: dataio.load_mask(p, target_hw) for idx, p in seq.mask_paths.items()
            }
    if not gt:
        raise FileNotFoundError(f"no ground-truth masks under {data_root}")
    return gt


def _load_pred_tracks(pred_root: Path) -> dict[str, inference.MaskTrack]:
    tracks = {}
    for seq_dir in sorted(p for p in pred_root.iterdir() if p.is_dir()):
        paths = sorted(seq_dir.glob("[0-9]*.png"))
        paths = [p for p in paths if not p.stem.endswith("_soft")]
        if not paths:
            continue
        masks = np.stack([np.asarray(dataio.load_mask(p)) for p in paths])
        tracks[seq_dir.name] = inference.MaskTrack(
            soft=masks.astype(np.float32), binary=masks > 0,
            counts=np.ones(len(masks), dtype=np.int64),
        )
    if not tracks:
        raise FileNotFoundError(f"no prediction masks under {pred_root}")
    return tracks


def cmd_eval(args) -> int:
    preds = _load_pred_tracks(Path(args.pred))
    sample = next(iter(preds.values()))
    gt = _load_gt_masks(Path(args.data), target_hw=sample.binary.shape[1:])
    gt = {name: frames for name, frames in gt.items() if name in preds}
    report = inference.evaluate(gt, preds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    table = report.format_table()
    (out / "eval_table.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_tta(args) -> int:
    cfg = tta.TtaConfig(k_percent=args.k_percent, window_n=args.window_n)
    extractor = tta.PatchStatsExtractor(stride=args.stride)
    pred_root = Path(args.masks)
    out = Path(args.out)
    for seq_dir in _sequence_dirs(Path(args.data)):
        seq = dataio.load_sequence(seq_dir)
        mask_dir = pred_root / seq.name if (pred_root / seq.name).is_dir() else pred_root
        mask_paths = sorted(p for p in mask_dir.glob("[0-9]*.png") if not p.stem.endswith("_soft"))
        if len(mask_paths) != len(seq):
            raise FileNotFoundError(
                f"{seq.name}: {len(mask_paths)} masks for {len(seq)} frames under {mask_dir}"
            )
        frames = np.stack([dataio.load_frame(p) for p in seq.frame_paths])
        masks = np.stack([dataio.load_mask(p).astype(np.float32) for p in mask_paths])
        track = tta.refine_sequence(frames, masks, extractor, cfg)
        inference.write_mask_track(track, out / seq.name, save_soft=args.save_soft)
        print(f"{seq.name}: refined {len(track.binary)} masks")
    return 0


def _overlay(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    tint = np.array([1.0, 0.2, 0.2])
    out = frame.copy()
    sel = mask > 0
    out[sel] = 0.5 * out[sel] + 0.5 * tint
    return out


def cmd_visualize(args) -> int:
    from PIL import Image

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = model_cfg = None
    if args.checkpoint is not None:
        model, model_cfg, _ = _load_model_from_checkpoint(args.checkpoint)
    for seq_dir in _sequence_dirs(Path(args.data)):
        seq = dataio.load_sequence(seq_dir)
        hw = model_cfg.encoder.input_hw if model_cfg is not None else None
        frames = np.stack([dataio.load_frame(p, hw) for p in seq.frame_paths])
        masks = None
        if args.masks is not None:
            mask_root = Path(args.masks)
            mask_dir = mask_root / seq.name if (mask_root / seq.name).is_dir() else mask_root
            paths = sorted(p for p in mask_dir.glob("[0-9]*.png") if not p.stem.endswith("_soft"))
            masks = [dataio.load_mask(p, frames.shape[1:3]) for p in paths]
        track = None
        if model is not None:
            track = inference.ensemble_sequence(model, frames, model_cfg.clip_len)
        seq_out = out / seq.name
        seq_out.mkdir(parents=True, exist_ok=True)
        for t in range(len(frames)):
            panels = [frames[t]]
            if masks is not None and t < len(masks):
                panels.append(_overlay(frames[t], masks[t]))
            if track is not None:
                panels.append(_overlay(frames[t], track.binary[t]))
                if model is not None and t + 1 < len(frames) and t + model_cfg.clip_len <= len(frames):
                    window = torch.from_numpy(frames[t : t + model_cfg.clip_len]).permute(0, 3, 1, 2)[None]
                    with torch.no_grad():
                        fv = model.encode_clip(window)
                        layered = model.reconstruct_pair(fv.fused, 0, 1)
                    panels.append(layered.composite[0].permute(1, 2, 0).numpy())
            strip = np.concatenate(panels, axis=1)
            Image.fromarray((np.clip(strip, 0, 1) * 255).astype(np.uint8)).save(
                seq_out / f"{t:05d}.png"
            )
        print(f"{seq.name}: wrote {len(frames)} panels")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotflow",
        description="Self-supervised moving-object segmentation from RGB clips.",
    )
    parser.add_argument("--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sprite dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON clip spec file (single clip or {'clips': [...]})")
    p.add_argument("--random-clips", type=int, default=0, help="generate N randomized clips")
    p.add_argument("--frames", type=int, default=7, help="frames per clip")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, help="dataset root (sequence dirs with frames/flow)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--preset", choices=["paper", "desk"], default="desk")
    p.add_argument("--config", help="JSON config file overriding the preset")
    p.add_argument("--iters", type=int, help="override total iterations")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write ensembled segmentation masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="sequence directory or root of sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--save-soft", action="store_true", help="also write 16-bit soft masks")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted mask PNGs per sequence")
    p.add_argument("--data", required=True, help="dataset root with ground-truth masks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tta", help="refine masks by key-frame propagation")
    p.add_argument("--data", required=True, help="sequence directory or root of sequences")
    p.add_argument("--masks", required=True, help="directory of predicted masks")
    p.add_argument("--out", required=True)
    p.add_argument("--k-percent", type=float, default=15.0)
    p.add_argument("--window-n", type=int, default=7)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--save-soft", action="store_true")
    p.set_defaults(func=cmd_tta)

    p = sub.add_parser("visualize", help="write frame/mask overlays and flow side-by-sides")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--masks", help="mask directory to overlay")
    p.add_argument("--checkpoint", help="model for predicted masks and flow")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (dataio.SequenceLoadError, dataio.FloFormatError, CheckpointError, RuntimeError,
            ValueError, KeyError, IndexError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
