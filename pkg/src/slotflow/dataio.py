"""Sequence loading, clip sampling, flow-file interchange and flow colorization.

Directory layout of a sequence::

    <seq>/frames/%05d.png      RGB frames (required)
    <seq>/masks/%05d.png       single-channel masks, possibly sparse (optional)
    <seq>/flow/%05d_%05d.flo   precomputed flow for ordered frame pairs (optional)

Flow files use the little-endian interchange format: float32 magic
202021.25, int32 width, int32 height, then height*width*2 float32 values
interleaved (u, v) in row-major order. ``u`` is horizontal (x) displacement,
``v`` vertical (y).

Frames are loaded into float arrays in [0, 1]; no mean/std normalization
happens here (the encoder owns that).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25


class FloFormatError(ValueError):
    """Malformed .flo payload; the message names the failing byte offset."""


class SequenceLoadError(ValueError):
    """Sequence directory does not follow the documented layout."""


@dataclass
class Sequence:
    """An on-disk frame sequence with optional sparse masks and flow files."""

    name: str
    frame_paths: list[Path]
    mask_paths: dict[int, Path] = field(default_factory=dict)
    flow_index: dict[tuple[int, int], Path] = field(default_factory=dict)
    resolution: tuple[int, int] = (0, 0)  # (H, W) of the first frame

    def __len__(self) -> int:
        return len(self.frame_paths)


@dataclass
class VideoClip:
    """T consecutive frames resized to the working resolution."""

    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    source: tuple[str, int]  # (sequence name, start index)
    gt_masks: dict[int, np.ndarray] = field(default_factory=dict)  # local idx -> (H, W) bool


def _numeric_stem(path: Path) -> int:
    digits = "".join(c for c in path.stem if c.isdigit())
    if not digits:
        raise SequenceLoadError(f"cannot derive a frame index from {path.name!r}")
    return int(digits)


def load_sequence(root_dir: str | Path) -> Sequence:
    """Load a sequence directory; masks and flows are optional, frames are not."""
    root = Path(root_dir)
    frame_dir = root / "frames"
    frame_paths = sorted(
        (p for p in frame_dir.glob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg")),
        key=_numeric_stem,
    ) if frame_dir.is_dir() else []
    if not frame_paths:
        raise SequenceLoadError(f"no frames found under {frame_dir}")

    mask_paths: dict[int, Path] = {}
    mask_dir = root / "masks"
    if mask_dir.is_dir():
        for p in sorted(mask_dir.glob("*.png")):
            mask_paths[_numeric_stem(p)] = p

    flow_index: dict[tuple[int, int], Path] = {}
    flow_dir = root / "flow"
    if flow_dir.is_dir():
        for p in sorted(flow_dir.glob("*.flo")):
            parts = p.stem.split("_")
            if len(parts) != 2:
                raise SequenceLoadError(f"flow file {p.name!r} is not named IIIII_JJJJJ.flo")
            i, j = int(parts[0]), int(parts[1])
            if not (0 <= i < len(frame_paths) and 0 <= j < len(frame_paths)):
                raise SequenceLoadError(
                    f"flow file {p.name!r} indexes frame pair ({i},{j}) outside 0..{len(frame_paths) - 1}"
                )
            flow_index[(i, j)] = p

    with Image.open(frame_paths[0]) as im:
        w, h = im.size
    return Sequence(root.name, frame_paths, mask_paths, flow_index, resolution=(h, w))


def load_frame(path: str | Path, target_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Read one RGB frame as float32 in [0, 1], optionally bilinearly resized."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if target_hw is not None and (im.height, im.width) != tuple(target_hw):
            im = im.resize((target_hw[1], target_hw[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_mask(path: str | Path, target_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Read a mask PNG, merge any integer labels, resize with nearest filter."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        if target_hw is not None and (im.height, im.width) != tuple(target_hw):
            im = im.resize((target_hw[1], target_hw[0]), Image.NEAREST)
        labels = np.asarray(im)
    return merge_annotations(labels).astype(bool)


def sample_clip(seq: Sequence, start: int, clip_len: int, target_hw: tuple[int, int]) -> VideoClip:
    """Cut ``clip_len`` consecutive frames starting at ``start``."""
    if start < 0 or start + clip_len > len(seq):
        raise IndexError(
            f"clip [{start}, {start + clip_len}) out of range for sequence of length {len(seq)}"
        )
    frames = np.stack([load_frame(p, target_hw) for p in seq.frame_paths[start : start + clip_len]])
    gt_masks = {
        idx - start: load_mask(seq.mask_paths[idx], target_hw)
        for idx in range(start, start + clip_len)
        if idx in seq.mask_paths
    }
    return VideoClip(frames=frames, source=(seq.name, start), gt_masks=gt_masks)


def merge_annotations(labels: np.ndarray) -> np.ndarray:
    """Collapse a multi-object integer label map to a single binary foreground."""
    return (np.asarray(labels) > 0).astype(np.uint8)


def read_flo(path: str | Path) -> np.ndarray:
    """Read a .flo file into an (H, W, 2) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FloFormatError(f"{path}: truncated header at byte offset 0")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != FLO_MAGIC:
        raise FloFormatError(f"{path}: bad magic {magic!r} at byte offset 0 (expected {FLO_MAGIC})")
    if len(data) < 12:
        raise FloFormatError(f"{path}: truncated dimensions at byte offset 4")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FloFormatError(f"{path}: non-positive dimensions {w}x{h} at byte offset 4")
    expected = 12 + w * h * 2 * 4
    if len(data) < expected:
        raise FloFormatError(
            f"{path}: truncated payload at byte offset {len(data)} (expected {expected} bytes)"
        )
    field_ = np.frombuffer(data[12:expected], dtype="<f4").reshape(h, w, 2)
    return field_.copy()


def write_flo(field_: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 2) field as .flo; round-trips bit-exactly for float32."""
    field_ = np.asarray(field_)
    if field_.ndim != 3 or field_.shape[2] != 2:
        raise ValueError(f"flow field must be (H, W, 2), got {field_.shape}")
    if not np.isfinite(field_).all():
        raise ValueError("flow field contains non-finite values")
    h, w = field_.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(field_, dtype="<f4").tobytes())


def resize_flow(field_: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a flow field, scaling u by W_new/W_old and v by H_new/H_old."""
    h, w = field_.shape[:2]
    th, tw = target_hw
    if (h, w) == (th, tw):
        return field_.astype(np.float32)
    out = np.empty((th, tw, 2), dtype=np.float32)
    for c, scale in ((0, tw / w), (1, th / h)):
        im = Image.fromarray(field_[..., c].astype(np.float32), mode="F")
        out[..., c] = np.asarray(im.resize((tw, th), Image.BILINEAR)) * scale
    return out


def _color_wheel() -> np.ndarray:
    """The 55-entry hue wheel used for flow rendering, values in [0, 1]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col : col + ry, 0] = 1.0
    wheel[col : col + ry, 1] = np.arange(ry) / ry
    col += ry
    wheel[col : col + yg, 0] = 1.0 - np.arange(yg) / yg
    wheel[col : col + yg, 1] = 1.0
    col += yg
    wheel[col : col + gc, 1] = 1.0
    wheel[col : col + gc, 2] = np.arange(gc) / gc
    col += gc
    wheel[col : col + cb, 1] = 1.0 - np.arange(cb) / cb
    wheel[col : col + cb, 2] = 1.0
    col += cb
    wheel[col : col + bm, 2] = 1.0
    wheel[col : col + bm, 0] = np.arange(bm) / bm
    col += bm
    wheel[col : col + mr, 2] = 1.0 - np.arange(mr) / mr
    wheel[col : col + mr, 0] = 1.0
    return wheel


def colorize_flow(field_: np.ndarray, max_mag: float | None = None, eps: float = 1e-8) -> np.ndarray:
    """Render a 2-channel flow field as RGB in [0, 1].

    Hue encodes direction, saturation encodes magnitude normalized by the
    per-field maximum (or ``max_mag`` when given); zero flow maps to white.
    """
    field_ = np.asarray(field_, dtype=np.float64)
    u, v = field_[..., 0], field_[..., 1]
    rad = np.sqrt(u * u + v * v)
    scale = float(rad.max()) if max_mag is None else float(max_mag)
    u = u / (scale + eps)
    v = v / (scale + eps)
    rad = np.sqrt(u * u + v * v)

    wheel = _color_wheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi  # in [-1, 1]
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0

    rgb = np.empty(rad.shape + (3,), dtype=np.float64)
    for c in range(3):
        col0 = wheel[k0, c]
        col1 = wheel[k1, c]
        col = (1 - f) * col0 + f * col1
        in_range = rad <= 1.0
        col = np.where(in_range, 1.0 - rad * (1.0 - col), col * 0.75)
        rgb[..., c] = col
    return rgb


def write_mask_png(mask: np.ndarray, path: str | Path, soft: bool = False) -> None:
    """Write a binary mask as 0/255 PNG, or a soft mask as 16-bit PNG."""
    if soft:
        arr = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
        im = Image.fromarray((arr * 65535).round().astype(np.uint16))
    else:
        im = Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255)
    im.save(path)
