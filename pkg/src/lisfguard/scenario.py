"""Synthetic desk-scale scenes: coloured objects on smooth noisy backgrounds.

Still images train the victim and the patch; short clips of a drifting
object (optionally carrying the patch) drive the video pipelines.  Every
render is a pure function of its config and seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attack import Patch, Placement, apply_patch, check_placement
from .region import RegionRect

CLASS_NAMES = ("red", "green", "blue", "yellow")
PALETTE = np.array([[0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.25, 0.3, 0.9], [0.85, 0.8, 0.2]], np.float32)
TARGET_CLASS = 3

# Knobs that suit the 48x48 scenes.  The library defaults (beta 0.75,
# theta 0.85) are tuned for full-size detectors and find nothing here.
DESK_KNOBS = {"beta": 0.4, "theta": 0.6, "window": 10, "top_k": 50, "bandwidth": 10.0}


def render_background(rng: np.random.Generator, size: int = 48) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.45 + 0.1 * np.sin(2 * np.pi * (rng.random() * xx + rng.random() * yy) + rng.random() * 6)
    img = np.repeat(base[None], 3, 0) + rng.normal(0, 0.03, (3, size, size))
    img += rng.uniform(-0.05, 0.05, (3, 1, 1))
    return img


@dataclass(frozen=True)
class Sprite:
    label: int
    pixels: np.ndarray  # (3, s, s)
    mask: np.ndarray  # (s, s) bool

    @property
    def side(self) -> int:
        return self.mask.shape[0]


def make_sprite(rng: np.random.Generator, label: int, side_range=(18, 26)) -> Sprite:
    s = int(rng.integers(*side_range))
    color = PALETTE[label] + rng.normal(0, 0.04, 3)
    yy, xx = np.mgrid[0:s, 0:s]
    if rng.random() < 0.5:
        mask = (yy - (s - 1) / 2) ** 2 + (xx - (s - 1) / 2) ** 2 <= (s / 2) ** 2
    else:
        mask = np.ones((s, s), bool)
    pixels = color[:, None, None] + rng.normal(0, 0.03, (3, s, s))
    return Sprite(label, pixels.astype(np.float64), mask)


def paste_sprite(img: np.ndarray, sprite: Sprite, row: int, col: int) -> np.ndarray:
    out = img.copy()
    region = out[:, row:row + sprite.side, col:col + sprite.side]
    region[:, sprite.mask] = sprite.pixels[:, sprite.mask]
    return np.clip(out, 0, 1).astype(np.float32)


def sample_image(rng: np.random.Generator, label: int, size: int = 48) -> tuple[np.ndarray, RegionRect]:
    bg = render_background(rng, size)
    sprite = make_sprite(rng, label)
    r, c = (int(v) for v in rng.integers(1, size - sprite.side - 1, 2))
    return paste_sprite(bg, sprite, r, c), RegionRect(r, c, sprite.side, sprite.side)


@dataclass
class ImageSet:
    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray
    boxes: list  # object RegionRects


def make_dataset(rng: np.random.Generator, n: int, size: int = 48, classes=(0, 1, 2, 3)) -> ImageSet:
    xs, ys, boxes = [], [], []
    for _ in range(n):
        y = int(rng.choice(classes))
        x, box = sample_image(rng, y, size)
        xs.append(x)
        ys.append(y)
        boxes.append(box)
    return ImageSet(np.array(xs), np.array(ys), boxes)


# --------------------------------------------------------------------------
# Video clips
# --------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    """Clip generation settings; loaded from / saved to JSON."""

    size: int = 48
    clips: int = 12
    frames: int = 20
    speed: float = 0.5  # max |velocity| per axis, pixels per frame
    classes: list = field(default_factory=lambda: [0, 1, 2])
    patch_file: str | None = None  # tensor file with (3, ph, pw) patch pixels
    patch_rotation: int = 0

    def __post_init__(self):
        if self.size < 32 or self.size % 8:
            raise ConfigError("size must be a multiple of 8 and at least 32")
        if self.clips < 1 or self.frames < 1:
            raise ConfigError("clips and frames must be positive")
        if self.speed < 0:
            raise ConfigError("speed must be non-negative")
        if not self.classes or any(not 0 <= c < len(PALETTE) for c in self.classes):
            raise ConfigError(f"classes must be drawn from 0..{len(PALETTE) - 1}")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Clip:
    frames: np.ndarray  # (T, 3, H, W)
    label: int
    object_boxes: list  # RegionRect per frame
    patch_boxes: list  # RegionRect per frame, or None when unpatched
    velocity: tuple  # (drow, dcol) per frame
    clean_frames: np.ndarray | None = None  # same clip without the patch

    def ground_truth(self) -> dict:
        return {"label": self.label, "velocity": list(self.velocity),
                "object_boxes": [b.to_dict() for b in self.object_boxes],
                "patch_boxes": [None if b is None else b.to_dict() for b in self.patch_boxes]}


def _position(start: float, v: float, t: int) -> int:
    return int(np.floor(start + v * t + 0.5))


def render_clip(rng: np.random.Generator, cfg: ScenarioConfig, label: int, patch: Patch | None = None) -> Clip:
    size, n = cfg.size, cfg.frames
    bg = render_background(rng, size)
    sprite = make_sprite(rng, label)
    s = sprite.side
    v = tuple(float(a) for a in rng.uniform(-cfg.speed, cfg.speed, 2))
    travel = [v[0] * (n - 1), v[1] * (n - 1)]
    start = []
    for a, dv in enumerate(travel):
        lo = 1 + max(0.0, -dv)
        hi = size - s - 1 - max(0.0, dv)
        start.append(float(rng.uniform(lo, max(lo, hi))))
    offset = None
    if patch is not None:
        ph, pw = patch.size
        if cfg.patch_rotation in (90, 270):
            ph, pw = pw, ph
        offset = (int(rng.integers(0, max(1, s - ph + 1))), int(rng.integers(0, max(1, s - pw + 1))))
    frames, clean, obj_boxes, patch_boxes = [], [], [], []
    for t in range(n):
        r, c = _position(start[0], v[0], t), _position(start[1], v[1], t)
        x = paste_sprite(bg, sprite, r, c)
        obj_boxes.append(RegionRect(r, c, s, s))
        clean.append(x)
        if patch is not None:
            pl = Placement(r + offset[0], c + offset[1], cfg.patch_rotation)
            patch_boxes.append(check_placement(patch, pl, x.shape))
            x = apply_patch(patch, x, pl)
        else:
            patch_boxes.append(None)
        frames.append(x)
    clean_frames = np.array(clean, np.float32) if patch is not None else None
    return Clip(np.array(frames, np.float32), label, obj_boxes, patch_boxes, v, clean_frames)


@dataclass
class Scenario:
    config: ScenarioConfig
    seed: int
    clips: list

    def ground_truth(self) -> dict:
        return {"seed": self.seed, "config": self.config.to_dict(),
                "clips": [c.ground_truth() for c in self.clips]}


def load_patch_file(path) -> Patch:
    from .io import load_tensor

    return Patch(load_tensor(path))


def build_scenario(cfg: ScenarioConfig, seed: int, patch: Patch | None = None, base_dir=None) -> Scenario:
    """Render every clip.  ``patch`` overrides ``cfg.patch_file``."""
    if patch is None and cfg.patch_file:
        p = Path(cfg.patch_file)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        patch = load_patch_file(p)
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(cfg.clips):
        label = int(cfg.classes[i % len(cfg.classes)])
        clips.append(render_clip(rng, cfg, label, patch))
    return Scenario(cfg, seed, clips)


def save_scenario(sc: Scenario, out_dir) -> None:
    from .io import save_tensor

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(sc.clips):
        save_tensor(out / f"clip_{i:03d}.tensor", clip.frames)
        if clip.clean_frames is not None:
            save_tensor(out / f"clip_{i:03d}_clean.tensor", clip.clean_frames)
    (out / "ground_truth.json").write_text(json.dumps(sc.ground_truth(), indent=1, sort_keys=True))


def load_scenario(path) -> Scenario:
    from .io import load_tensor

    path = Path(path)
    gt = json.loads((path / "ground_truth.json").read_text())
    cfg = ScenarioConfig.from_dict(gt["config"])
    clips = []
    for i, c in enumerate(gt["clips"]):
        frames = load_tensor(path / f"clip_{i:03d}.tensor")
        boxes = [RegionRect(**b) for b in c["object_boxes"]]
        pboxes = [None if b is None else RegionRect(**b) for b in c["patch_boxes"]]
        clean_path = path / f"clip_{i:03d}_clean.tensor"
        clean = load_tensor(clean_path) if clean_path.exists() else None
        clips.append(Clip(frames, c["label"], boxes, pboxes, tuple(c["velocity"]), clean))
    return Scenario(cfg, gt["seed"], clips)
