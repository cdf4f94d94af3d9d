"""Synthetic moving-sprite clips with analytically exact flow and masks.

Sprites follow rigid trajectories (translation plus optional constant-rate
rotation) over a static or uniformly panning background. Rasterization
rounds sprite centers to the nearest pixel; flow values are computed from
the float-precision trajectory, so ground truth stays exact for every
ordered frame pair. Each pixel carries the flow of its topmost owner in
the source frame (forward-flow semantics).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataio

DEFAULT_MAX_STEP = 8.0


class SpriteSpecError(ValueError):
    """A sprite spec violates its invariants (off canvas, too fast, malformed)."""


@dataclass(frozen=True)
class Texture:
    kind: str = "flat_color"  # flat_color | checker | noise
    colors: tuple = ((0.8, 0.25, 0.2),)
    cell: int = 4  # checker cell edge in px

    def __post_init__(self):
        if self.kind not in ("flat_color", "checker", "noise"):
            raise SpriteSpecError(f"unknown texture kind {self.kind!r}")
        if self.kind == "checker" and len(self.colors) < 2:
            raise SpriteSpecError("checker texture needs two colors")


@dataclass(frozen=True)
class SpriteSpec:
    """One rigid sprite: shape, texture and trajectory.

    ``start`` is the center (x, y) at t=0 and ``velocity`` the per-frame
    displacement (vx, vy); ``waypoints``, when given, override the linear
    path with explicit per-frame centers. ``size_px`` is (height, width).
    """

    shape_kind: str = "rectangle"  # rectangle | ellipse | polygon
    size_px: tuple[int, int] = (16, 16)
    texture: Texture = field(default_factory=Texture)
    start: tuple[float, float] = (24.0, 24.0)
    velocity: tuple[float, float] = (2.0, 0.0)
    rotation_speed: float = 0.0  # radians per frame
    waypoints: tuple[tuple[float, float], ...] | None = None
    vertices: tuple[tuple[float, float], ...] | None = None  # polygon, sprite-local (x, y)
    z_order: int = 0

    def __post_init__(self):
        if self.shape_kind not in ("rectangle", "ellipse", "polygon"):
            raise SpriteSpecError(f"unknown shape kind {self.shape_kind!r}")
        if min(self.size_px) < 1:
            raise SpriteSpecError(f"sprite size {self.size_px} must be positive")

    def center(self, t: int) -> np.ndarray:
        if self.waypoints is not None:
            return np.asarray(self.waypoints[t], dtype=np.float64)
        return np.asarray(self.start, dtype=np.float64) + t * np.asarray(self.velocity, dtype=np.float64)

    def angle(self, t: int) -> float:
        return self.rotation_speed * t

    def local_vertices(self) -> np.ndarray:
        if self.vertices is not None:
            return np.asarray(self.vertices, dtype=np.float64)
        # default polygon: regular pentagon inscribed in the size box
        r = min(self.size_px) / 2.0
        ang = np.arange(5) * (2 * math.pi / 5) - math.pi / 2
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


@dataclass(frozen=True)
class CanvasConfig:
    height: int = 96
    width: int = 192
    background: Texture = field(default_factory=lambda: Texture(colors=((0.16, 0.17, 0.2),)))
    velocity: tuple[float, float] = (0.0, 0.0)  # camera pan (vx, vy) px/frame


class SyntheticClip:
    """Rendered frames plus exact per-pair ground-truth flow and masks."""

    def __init__(self, frames, gt_masks, owners, centers, angles, bg_velocity, sprites, canvas, seed):
        self.frames = frames  # (T, H, W, 3) float32
        self.gt_masks = gt_masks  # (T, H, W) bool
        self._owners = owners  # (T, H, W) int16, -1 = background
        self._centers = centers  # (T, S, 2) float64, (x, y)
        self._angles = angles  # (T, S) float64
        self._bg_velocity = np.asarray(bg_velocity, dtype=np.float64)
        self.sprites = sprites
        self.canvas = canvas
        self.seed = seed
        self._max_mag: float | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def gt_flow(self, i: int, j: int) -> np.ndarray:
        """Exact displacement field (H, W, 2) from frame i to frame j."""
        T, H, W = self.gt_masks.shape
        if not (0 <= i < T and 0 <= j < T):
            raise IndexError(f"frame pair ({i}, {j}) out of range for {T} frames")
        flow = np.empty((H, W, 2), dtype=np.float64)
        flow[...] = (j - i) * self._bg_velocity
        owners = self._owners[i]
        for s in range(len(self.sprites)):
            sel = owners == s
            if not sel.any():
                continue
            ci, cj = self._centers[i, s], self._centers[j, s]
            dtheta = self._angles[j, s] - self._angles[i, s]
            if dtheta == 0.0:
                flow[sel] = cj - ci
            else:
                ys, xs = np.nonzero(sel)
                p = np.stack([xs, ys], axis=1).astype(np.float64)
                rel = p - ci
                c, sn = math.cos(dtheta), math.sin(dtheta)
                moved = np.stack([c * rel[:, 0] - sn * rel[:, 1], sn * rel[:, 0] + c * rel[:, 1]], axis=1)
                flow[sel] = cj + moved - p
        return flow.astype(np.float32)

    def max_flow_magnitude(self) -> float:
        """Largest displacement magnitude over all ordered pairs (cached)."""
        if self._max_mag is None:
            m = 0.0
            for i in range(self.num_frames):
                for j in range(self.num_frames):
                    if i != j:
                        f = self.gt_flow(i, j)
                        m = max(m, float(np.sqrt((f ** 2).sum(-1)).max()))
            self._max_mag = m
        return self._max_mag


def _coverage(spec: SpriteSpec, center: np.ndarray, angle: float, hw: tuple[int, int]) -> np.ndarray:
    """Boolean coverage map of one sprite rasterized at a rounded center."""
    H, W = hw
    cx, cy = np.round(center[0]), np.round(center[1])
    X, Y = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dx, dy = X - cx, Y - cy
    c, s = math.cos(angle), math.sin(angle)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    h, w = spec.size_px
    if spec.shape_kind == "rectangle":
        return (np.abs(lx) <= w / 2.0) & (np.abs(ly) <= h / 2.0)
    if spec.shape_kind == "ellipse":
        return (lx / (w / 2.0)) ** 2 + (ly / (h / 2.0)) ** 2 <= 1.0
    verts = spec.local_vertices()
    inside = np.zeros((H, W), dtype=bool)
    n = len(verts)
    for k in range(n):
        xa, ya = verts[k]
        xb, yb = verts[(k + 1) % n]
        crosses = (ya > ly) != (yb > ly)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xa + (ly - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (lx < xint)
    return inside


def _sprite_colors(spec: SpriteSpec, center, angle, sel, noise_patch, hw):
    """Colors of the covered pixels, sampled in sprite-local coordinates."""
    H, W = hw
    ys, xs = np.nonzero(sel)
    cx, cy = np.round(center[0]), np.round(center[1])
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(angle), math.sin(angle)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    tex = spec.texture
    if tex.kind == "flat_color":
        return np.broadcast_to(np.asarray(tex.colors[0], dtype=np.float32), (len(xs), 3))
    if tex.kind == "checker":
        idx = (np.floor(lx / tex.cell) + np.floor(ly / tex.cell)).astype(int) % 2
        palette = np.asarray(tex.colors[:2], dtype=np.float32)
        return palette[idx]
    # noise: nearest-neighbor lookup into the sprite's own random patch
    ph, pw = noise_patch.shape[:2]
    iy = np.clip(np.round(ly + ph / 2).astype(int), 0, ph - 1)
    ix = np.clip(np.round(lx + pw / 2).astype(int), 0, pw - 1)
    return noise_patch[iy, ix]


def _texture_image(tex: Texture, hw: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    H, W = hw
    if tex.kind == "flat_color":
        return np.broadcast_to(np.asarray(tex.colors[0], dtype=np.float32), (H, W, 3)).copy()
    if tex.kind == "checker":
        Y, X = np.indices((H, W))
        idx = ((X // tex.cell) + (Y // tex.cell)) % 2
        return np.asarray(tex.colors[:2], dtype=np.float32)[idx]
    return rng.random((H, W, 3), dtype=np.float32)


def generate_clip(
    sprites: list[SpriteSpec],
    canvas: CanvasConfig,
    num_frames: int,
    seed: int,
    max_step: float = DEFAULT_MAX_STEP,
) -> SyntheticClip:
    """Render a clip; deterministic for a fixed (spec, seed).

    Raises SpriteSpecError when a sprite fully leaves the canvas at any
    frame or its per-step center displacement exceeds ``max_step``.
    """
    if num_frames < 2:
        raise ValueError(f"need at least 2 frames, got {num_frames}")
    H, W = canvas.height, canvas.width
    rng = np.random.default_rng(seed)

    bg_base = _texture_image(canvas.background, (H, W), rng)
    noise_patches = []
    for spec in sprites:
        margin = int(math.ceil(math.hypot(*spec.size_px))) + 2
        noise_patches.append(
            rng.random((margin, margin, 3), dtype=np.float32) if spec.texture.kind == "noise" else None
        )

    for s, spec in enumerate(sprites):
        for t in range(num_frames - 1):
            step = float(np.linalg.norm(spec.center(t + 1) - spec.center(t)))
            if step > max_step + 1e-9:
                raise SpriteSpecError(
                    f"sprite {s} moves {step:.2f} px between frames {t} and {t + 1} (limit {max_step})"
                )

    order = sorted(range(len(sprites)), key=lambda s: sprites[s].z_order)
    frames = np.empty((num_frames, H, W, 3), dtype=np.float32)
    owners = np.full((num_frames, H, W), -1, dtype=np.int16)
    centers = np.zeros((num_frames, len(sprites), 2), dtype=np.float64)
    angles = np.zeros((num_frames, len(sprites)), dtype=np.float64)
    bg_v = np.asarray(canvas.velocity, dtype=np.float64)

    for t in range(num_frames):
        shift = np.round(t * bg_v).astype(int)
        frame = np.roll(bg_base, (shift[1], shift[0]), axis=(0, 1)).copy()
        owner = owners[t]
        for s in order:
            spec = sprites[s]
            center = spec.center(t)
            angle = spec.angle(t)
            centers[t, s] = center
            angles[t, s] = angle
            sel = _coverage(spec, center, angle, (H, W))
            if not sel.any():
                raise SpriteSpecError(f"sprite {s} fully exits the canvas at frame {t}")
            frame[sel] = _sprite_colors(spec, center, angle, sel, noise_patches[s], (H, W))
            owner[sel] = s
        frames[t] = frame

    gt_masks = owners >= 0
    return SyntheticClip(frames, gt_masks, owners, centers, angles, bg_v, list(sprites), canvas, seed)


def flow_pair_dataset(clip: SyntheticClip, i: int, j: int, max_mag: float | None = None):
    """Frame pair plus the colorized flow target for reconstruction training."""
    T = clip.num_frames
    if not (0 <= i < T and 0 <= j < T):
        raise IndexError(f"frame pair ({i}, {j}) out of range for {T} frames")
    target = dataio.colorize_flow(clip.gt_flow(i, j), max_mag=max_mag)
    return (clip.frames[i], clip.frames[j]), target.astype(np.float32)


def export_clip(clip: SyntheticClip, out_dir: str | Path) -> Path:
    """Write the clip in the standard sequence layout plus a manifest."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "flow").mkdir(exist_ok=True)
    T = clip.num_frames
    for t in range(T):
        Image.fromarray((clip.frames[t] * 255).round().astype(np.uint8)).save(
            out / "frames" / f"{t:05d}.png"
        )
        dataio.write_mask_png(clip.gt_masks[t], out / "masks" / f"{t:05d}.png")
    for i in range(T):
        for j in range(T):
            if i != j:
                dataio.write_flo(clip.gt_flow(i, j), out / "flow" / f"{i:05d}_{j:05d}.flo")
    manifest = {
        "seed": clip.seed,
        "num_frames": T,
        "canvas": canvas_to_dict(clip.canvas),
        "sprites": [sprite_to_dict(s) for s in clip.sprites],
        "max_flow_magnitude": clip.max_flow_magnitude(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


# --- JSON (de)serialization used by the manifest and the CLI spec files ---

def texture_to_dict(tex: Texture) -> dict:
    return {"kind": tex.kind, "colors": [list(c) for c in tex.colors], "cell": tex.cell}


def texture_from_dict(d: dict) -> Texture:
    return Texture(
        kind=d.get("kind", "flat_color"),
        colors=tuple(tuple(c) for c in d.get("colors", [(0.8, 0.25, 0.2)])),
        cell=int(d.get("cell", 4)),
    )


def sprite_to_dict(s: SpriteSpec) -> dict:
    d = {
        "shape": s.shape_kind,
        "size": list(s.size_px),
        "texture": texture_to_dict(s.texture),
        "start": list(s.start),
        "velocity": list(s.velocity),
        "rotation_speed": s.rotation_speed,
        "z_order": s.z_order,
    }
    if s.waypoints is not None:
        d["waypoints"] = [list(p) for p in s.waypoints]
    if s.vertices is not None:
        d["vertices"] = [list(p) for p in s.vertices]
    return d


def sprite_from_dict(d: dict) -> SpriteSpec:
    known = {"shape", "size", "texture", "start", "velocity", "rotation_speed", "z_order", "waypoints", "vertices"}
    unknown = set(d) - known
    if unknown:
        raise SpriteSpecError(f"unknown sprite spec key {sorted(unknown)[0]!r}")
    return SpriteSpec(
        shape_kind=d.get("shape", "rectangle"),
        size_px=tuple(d.get("size", (16, 16))),
        texture=texture_from_dict(d.get("texture", {})),
        start=tuple(d.get("start", (24.0, 24.0))),
        velocity=tuple(d.get("velocity", (2.0, 0.0))),
        rotation_speed=float(d.get("rotation_speed", 0.0)),
        waypoints=tuple(tuple(p) for p in d["waypoints"]) if "waypoints" in d else None,
        vertices=tuple(tuple(p) for p in d["vertices"]) if "vertices" in d else None,
        z_order=int(d.get("z_order", 0)),
    )


def canvas_to_dict(c: CanvasConfig) -> dict:
    return {
        "height": c.height,
        "width": c.width,
        "background": texture_to_dict(c.background),
        "velocity": list(c.velocity),
    }


def canvas_from_dict(d: dict) -> CanvasConfig:
    return CanvasConfig(
        height=int(d.get("height", 96)),
        width=int(d.get("width", 192)),
        background=texture_from_dict(d.get("background", {})),
        velocity=tuple(d.get("velocity", (0.0, 0.0))),
    )


# --- randomized corpora for training/eval at desk scale ---

_PALETTE = (
    (0.85, 0.2, 0.2), (0.2, 0.7, 0.25), (0.2, 0.35, 0.85), (0.9, 0.75, 0.15),
    (0.75, 0.25, 0.8), (0.1, 0.75, 0.75), (0.95, 0.5, 0.15),
)


def random_sprite(rng: np.random.Generator, canvas: CanvasConfig, num_frames: int) -> SpriteSpec:
    """Draw a sprite that provably stays on canvas for the whole clip."""
    H, W = canvas.height, canvas.width
    size = int(rng.integers(min(H, W) // 6, min(H, W) // 3))
    shape = rng.choice(["rectangle", "ellipse", "polygon"])
    speed = rng.uniform(1.5, 4.0)
    heading = rng.uniform(0, 2 * math.pi)
    vel = (speed * math.cos(heading), speed * math.sin(heading))
    travel = (num_frames - 1) * np.asarray(vel)
    margin = size / 2 + 2
    lo_x = margin + max(0.0, -travel[0])
    hi_x = W - margin - max(0.0, travel[0])
    lo_y = margin + max(0.0, -travel[1])
    hi_y = H - margin - max(0.0, travel[1])
    if lo_x >= hi_x or lo_y >= hi_y:
        # too fast for this canvas; slow down and recurse
        return random_sprite(rng, canvas, max(2, num_frames - 1))
    start = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
    color = _PALETTE[int(rng.integers(len(_PALETTE)))]
    kind = rng.choice(["flat_color", "checker", "noise"], p=[0.6, 0.25, 0.15])
    colors = (color, tuple(min(1.0, c + 0.35) for c in color)) if kind == "checker" else (color,)
    return SpriteSpec(
        shape_kind=str(shape),
        size_px=(size, size),
        texture=Texture(kind=str(kind), colors=colors, cell=max(2, size // 4)),
        start=start,
        velocity=vel,
    )


def random_corpus(
    num_clips: int,
    canvas: CanvasConfig,
    num_frames: int,
    seed: int,
    moving_background_fraction: float = 0.25,
) -> list[SyntheticClip]:
    """Generate single-sprite clips over static and panning backgrounds."""
    root_rng = np.random.default_rng(seed)
    clips = []
    for k in range(num_clips):
        clip_seed = int(root_rng.integers(2 ** 31))
        rng = np.random.default_rng(clip_seed)
        cv = canvas
        if rng.random() < moving_background_fraction:
            pan = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
            bg = Texture(kind="checker", colors=((0.2, 0.2, 0.25), (0.3, 0.3, 0.33)), cell=8)
            cv = CanvasConfig(canvas.height, canvas.width, background=bg, velocity=(float(pan), 0.0))
        sprite = random_sprite(rng, cv, num_frames)
        clips.append(generate_clip([sprite], cv, num_frames, seed=clip_seed))
    return clips
