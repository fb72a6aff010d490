"""Deterministic synthetic video generation.

Two generators: a controlled two-set scene (one set of objects translating
horizontally, a matched-appearance set translating vertically) used for the
similarity-separability analysis, and a 4-class motion-classification
dataset (left / right / clockwise / counterclockwise) in which appearance,
size, position, and speed are randomized per clip so that no single frame,
nor the temporal-mean frame, determines the label.

Rendering is grayscale, hard-edged, with no anti-aliasing: every clip is a
pure function of its spec and seed, bitwise reproducible across platforms.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, ShapeError, load_tensor, save_tensor

SHAPES = ("circle", "square", "cross")
LABELS = {0: "left", 1: "right", 2: "cw", 3: "ccw"}
PATCH = 4


@dataclass(frozen=True)
class Translate:
    """Constant per-frame displacement in pixels (x right, y down)."""

    dx: float
    dy: float


@dataclass(frozen=True)
class Orbit:
    """Circular trajectory around (cx, cy); cw advances the angle so the
    object moves right at the top of the orbit (screen coordinates)."""

    cx: float
    cy: float
    radius: float
    step: float
    direction: str  # "cw" | "ccw"

    def __post_init__(self):
        if self.direction not in ("cw", "ccw"):
            raise ConfigError(f"orbit direction must be cw/ccw, got {self.direction!r}")
        if self.step <= 0.0:
            raise ConfigError(f"orbit angular step must be positive, got {self.step}")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    intensity: float
    radius: float  # half-extent in pixels
    trajectory: Translate | Orbit
    phase: float = 0.0  # start angle for orbits

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if not 0.0 < self.intensity <= 1.0:
            raise ConfigError(f"intensity must lie in (0, 1], got {self.intensity}")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    height: int = 32
    width: int = 32
    frames: int = 8


@dataclass(frozen=True)
class MotionClip:
    pixels: np.ndarray  # (T, H, W, 1) float32 in [0, 1]
    label: int
    index: int
    seed: int


@dataclass(frozen=True)
class PatchEmbed:
    """Frozen random linear projection of non-overlapping 4x4 patches."""

    weight: np.ndarray  # (16, C)
    bias: np.ndarray    # (C,)


# ---------------------------------------------------------------------------
# Rasterization


def _object_center(obj: ObjectSpec, start: tuple[float, float], t: int):
    traj = obj.trajectory
    if isinstance(traj, Translate):
        return start[0] + traj.dx * t, start[1] + traj.dy * t
    sign = 1.0 if traj.direction == "cw" else -1.0
    theta = obj.phase + sign * traj.step * t
    return traj.cx + traj.radius * np.cos(theta), traj.cy + traj.radius * np.sin(theta)


def _raster_mask(shape: str, cx: float, cy: float, r: float,
                 height: int, width: int) -> np.ndarray:
    yy, xx = np.ogrid[0:height, 0:width]
    dx = xx - cx
    dy = yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # cross: two perpendicular bars of half-width r/2
    arm = r / 2.0
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
           ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def render_scene(spec: SceneSpec, starts: list[tuple[float, float]]):
    """Rasterize a scene; returns pixels (T,H,W,1) and masks (N,T,H,W).

    `starts` gives each object's frame-0 center (ignored for orbits, which
    carry their own center). Later objects overwrite earlier pixels; the
    returned masks are the raw per-object footprints.
    """
    t_n, h_n, w_n = spec.frames, spec.height, spec.width
    pixels = np.zeros((t_n, h_n, w_n, 1), dtype=np.float32)
    masks = np.zeros((len(spec.objects), t_n, h_n, w_n), dtype=bool)
    for i, obj in enumerate(spec.objects):
        for t in range(t_n):
            cx, cy = _object_center(obj, starts[i], t)
            mask = _raster_mask(obj.shape, cx, cy, obj.radius, h_n, w_n)
            masks[i, t] = mask
            pixels[t, :, :, 0][mask] = obj.intensity
    return pixels, masks


def _uniform_start(rng, travel: float, radius: float, extent: int,
                   band: tuple[float, float] | None = None) -> float:
    """Uniform start coordinate for a linear path that stays inside the
    canvas (and whose midpoint stays inside `band`, when given).

    The path MIDPOINT is drawn uniformly in the feasible interval and the
    start derived from it. Drawing rather than clamping avoids boundary
    point masses, and midpoint placement is invariant under time reversal,
    so the temporal-mean frame cannot reveal which end of the path was the
    start.
    """
    half = abs(travel) / 2.0
    lo = radius + 0.5 + half
    hi = extent - 1.5 - radius - half
    if band is not None:
        lo = max(lo, band[0])
        hi = min(hi, band[1])
    if hi <= lo:
        mid = (lo + hi) / 2.0
    else:
        mid = float(rng.uniform(lo, hi))
    return mid - travel / 2.0


# ---------------------------------------------------------------------------
# Two-set scene

TOY_HEIGHT = 64
TOY_WIDTH = 64
TOY_FRAMES = 6
TOY_CELL_SPEED = 4.0  # one feature cell per frame
# Cell-sized objects whose within-cell pixel patterns are pairwise distinct
# (full block, center block, plus shape), so appearance similarity between
# different shapes stays well below the twin's exact match.
_TOY_SHAPES = ("circle", "square", "cross")
_TOY_RADII = {"circle": 1.2, "square": 1.5, "cross": 1.9}
_TOY_INTENSITIES = (1.0, 0.75, 0.55)
_TOY_COLS = (2, 5, 8)   # feature-grid columns of the three objects
_TOY_ROW_A = 3          # set 0 row, translating right
_TOY_ROW_B = 5          # set 1 row, translating down


def _cell_center(row: int, col: int) -> tuple[float, float]:
    return 4.0 * col + 1.5, 4.0 * row + 1.5


def gen_toy_scene(seed: int = 0):
    """Two sets of three objects with matched appearance across sets.

    Set 0 translates rightward, set 1 downward, both at one feature cell
    (4 px) per frame, so appearances translate exactly on the patch grid.
    Returns (pixels, masks, meta): meta[i] describes object i with its set,
    shape, intensity, and the index of its matched-appearance twin.

    The layout is deterministic; the seed is accepted only to keep the
    signature uniform with the other generators.
    """
    del seed
    objects = []
    starts = []
    meta = []
    for j, (shape, intensity) in enumerate(zip(_TOY_SHAPES, _TOY_INTENSITIES)):
        objects.append(ObjectSpec(shape, intensity, _TOY_RADII[shape],
                                  Translate(TOY_CELL_SPEED, 0.0)))
        starts.append(_cell_center(_TOY_ROW_A, _TOY_COLS[j]))
        meta.append({"set": 0, "shape": shape, "intensity": intensity,
                     "twin": j + 3})
    for j, (shape, intensity) in enumerate(zip(_TOY_SHAPES, _TOY_INTENSITIES)):
        objects.append(ObjectSpec(shape, intensity, _TOY_RADII[shape],
                                  Translate(0.0, TOY_CELL_SPEED)))
        starts.append(_cell_center(_TOY_ROW_B, _TOY_COLS[j]))
        meta.append({"set": 1, "shape": shape, "intensity": intensity,
                     "twin": j})
    spec = SceneSpec(tuple(objects), TOY_HEIGHT, TOY_WIDTH, TOY_FRAMES)
    pixels, masks = render_scene(spec, starts)
    return pixels, masks, meta


def masks_to_grid(masks: np.ndarray, min_pixels: int = 8) -> np.ndarray:
    """Pool pixel masks to the 4x4 feature grid by coverage count."""
    n, t, h, w = masks.shape
    if h % PATCH or w % PATCH:
        raise ShapeError(f"mask extents {(h, w)} not divisible by {PATCH}")
    blocks = masks.reshape(n, t, h // PATCH, PATCH, w // PATCH, PATCH)
    return blocks.sum(axis=(3, 5)) >= min_pixels


# ---------------------------------------------------------------------------
# Motion-classification dataset


def _clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_motion_clip(label: int, index: int, seed: int,
                     frames: int = 8, height: int = 32, width: int = 32,
                     min_speed: float = 1.0,
                     min_step: float = np.pi / 8) -> MotionClip:
    """One clip of a single moving object whose label is its motion class."""
    if label not in LABELS:
        raise ConfigError(f"label must be one of {sorted(LABELS)}, got {label}")
    if min_speed <= 0.0:
        raise ConfigError(f"translation speed must be positive, got {min_speed}")
    if min_step <= 0.0:
        raise ConfigError(f"angular step must be positive, got {min_step}")
    rng = _clip_rng(seed, index)
    shape = SHAPES[rng.integers(0, len(SHAPES))]
    intensity = float(rng.uniform(0.3, 1.0))
    # The translation classes mimic the orbit classes' footprint statistics
    # (same size range, same central placement band for the path midpoint,
    # comparable vertical span via the drift magnitude floor), so the
    # temporal-mean frame carries as little class information as possible.
    radius = float(rng.uniform(3.0, 4.5))
    span = float(rng.uniform(4.0, 6.0))
    margin = span + radius + 0.5
    band_w = (margin, width - 1 - margin)
    band_h = (margin, height - 1 - margin)
    if label in (0, 1):
        x_cap = (width - 2 * radius - 3) / (frames - 1)
        speed = float(rng.uniform(max(min_speed, 1.4),
                                  max(min_speed * 1.01, min(2.4, x_cap))))
        dx = -speed if label == 0 else speed
        dy = float(rng.uniform(1.0, min(1.8, max(1.05, 0.9 * speed))))
        dy *= 1.0 if rng.random() < 0.5 else -1.0
        x0 = _uniform_start(rng, dx * (frames - 1), radius, width, band=band_w)
        y0 = _uniform_start(rng, dy * (frames - 1), radius, height, band=band_h)
        obj = ObjectSpec(shape, intensity, radius, Translate(dx, dy))
        start = (x0, y0)
    else:
        # The arc must advance about one feature cell per frame with a large
        # turn angle, otherwise the rotation sense is unresolvable on the
        # patch grid; the range still keeps total coverage under one lap.
        step = float(rng.uniform(max(min_step, 3.0 / span),
                                 max(min_step * 1.01,
                                     min(2 * np.pi / 7, 4.6 / span))))
        orbit_r = span
        cx = float(rng.uniform(*band_w))
        cy = float(rng.uniform(*band_h))
        direction = "cw" if label == 2 else "ccw"
        phase = float(rng.uniform(0.0, 2 * np.pi))
        obj = ObjectSpec(shape, intensity, radius,
                         Orbit(cx, cy, orbit_r, step, direction), phase)
        start = (cx, cy)
    spec = SceneSpec((obj,), height, width, frames)
    pixels, _ = render_scene(spec, [start])
    return MotionClip(pixels, label, index, seed)


def gen_motion_dataset(n_per_class: int, seed: int = 0, frames: int = 8,
                       height: int = 32, width: int = 32) -> list[MotionClip]:
    """Balanced 4-class dataset ordered label-major: n left, n right, n cw, n ccw."""
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    clips = []
    index = 0
    for label in sorted(LABELS):
        for _ in range(n_per_class):
            clips.append(make_motion_clip(label, index, seed, frames, height, width))
            index += 1
    return clips


def reverse_clip(clip: MotionClip) -> MotionClip:
    """Temporal reversal; swaps left/right and cw/ccw."""
    swapped = {0: 1, 1: 0, 2: 3, 3: 2}[clip.label]
    return MotionClip(np.ascontiguousarray(clip.pixels[::-1]), swapped,
                      clip.index, clip.seed)


def mirror_clip(clip: MotionClip) -> MotionClip:
    """Horizontal mirror; swaps left/right and cw/ccw."""
    swapped = {0: 1, 1: 0, 2: 3, 3: 2}[clip.label]
    return MotionClip(np.ascontiguousarray(clip.pixels[:, :, ::-1]), swapped,
                      clip.index, clip.seed)


# ---------------------------------------------------------------------------
# Patch embedding


def make_patch_embed(channels: int, seed: int = 0, dtype=np.float32,
                     orthogonal: bool = False,
                     bias_scale: float = 0.1) -> PatchEmbed:
    """Seeded frozen projection.

    With orthogonal=True (requires C = 16) the projection is an exact
    isometry, so patch-space cosines are preserved. With bias_scale = 0,
    all-zero patches map to the zero vector and fall under the similarity
    policy's zero-norm rule.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9a7c]))
    if orthogonal:
        if channels != PATCH * PATCH:
            raise ConfigError(
                f"orthogonal embedding needs channels == {PATCH * PATCH}, "
                f"got {channels}"
            )
        gauss = rng.standard_normal((PATCH * PATCH, PATCH * PATCH))
        weight, r = np.linalg.qr(gauss)
        weight = (weight * np.sign(np.diag(r))).astype(dtype)
    else:
        scale = 1.0 / np.sqrt(PATCH * PATCH)
        weight = (rng.standard_normal((PATCH * PATCH, channels)) * scale).astype(dtype)
    bias = (rng.standard_normal(channels) * bias_scale).astype(dtype)
    return PatchEmbed(weight, bias)


def patch_embed(pixels: np.ndarray, embed: PatchEmbed) -> np.ndarray:
    """Project non-overlapping 4x4 patches: (T, H, W, 1) -> (T, H/4, W/4, C)."""
    pixels = np.ascontiguousarray(pixels)
    if pixels.ndim != 4 or pixels.shape[-1] != 1:
        raise ShapeError(f"pixels must be (T,H,W,1), got {pixels.shape}")
    t, h, w, _ = pixels.shape
    if h % PATCH or w % PATCH:
        raise ShapeError(f"canvas {(h, w)} not divisible by patch size {PATCH}")
    grid_h, grid_w = h // PATCH, w // PATCH
    patches = pixels[..., 0].reshape(t, grid_h, PATCH, grid_w, PATCH)
    patches = patches.transpose(0, 1, 3, 2, 4).reshape(t, grid_h, grid_w, PATCH * PATCH)
    out = patches.astype(embed.weight.dtype) @ embed.weight + embed.bias
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Dataset on disk: one tensor container per clip plus a JSON manifest.


def _spec_hash(seed: int, frames: int, height: int, width: int) -> str:
    blob = json.dumps({"seed": seed, "frames": frames, "height": height,
                       "width": width, "patch": PATCH},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_dataset(clips: list[MotionClip], out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for clip in clips:
        fname = f"clip_{clip.index:05d}.mosst"
        save_tensor(os.path.join(out_dir, fname), clip.pixels)
        t, h, w, _ = clip.pixels.shape
        records.append({
            "index": clip.index,
            "label": clip.label,
            "seed": clip.seed,
            "file": fname,
            "spec_hash": _spec_hash(clip.seed, t, h, w),
        })
    manifest = os.path.join(out_dir, "manifest.json")
    with open(manifest, "w") as fh:
        json.dump({"clips": records}, fh, indent=2)
    return manifest


def load_dataset(data_dir: str) -> list[MotionClip]:
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    clips = []
    for rec in manifest["clips"]:
        pixels = load_tensor(os.path.join(data_dir, rec["file"]))
        clips.append(MotionClip(pixels, rec["label"], rec["index"], rec["seed"]))
    return clips
