"""Adversarial patch generation and application."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .region import RegionRect
from .tensor_net import (Conv, CrossEntropyLoss, Network, backward, conv_backward_input,
                         conv_valid, forward, log_softmax, pad_hw)

log = logging.getLogger(__name__)

ROTATIONS = (0, 90, 180, 270)


class PlacementError(ValueError):
    pass


@dataclass
class Patch:
    pixels: np.ndarray  # (C, ph, pw) in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or min(self.pixels.shape[1:]) < 1:
            raise ValueError(f"patch must be (C, ph, pw) with ph, pw >= 1, got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("patch pixels must lie in [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int, ph: int, pw: int) -> "Patch":
        return cls(rng.random((channels, ph, pw), dtype=np.float32))


@dataclass(frozen=True)
class Placement:
    row: int
    col: int
    rotation: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise PlacementError(f"rotation must be one of {ROTATIONS}")
        if not self.scale > 0:
            raise PlacementError("scale must be positive")


def transform_patch(patch: Patch, placement: Placement) -> np.ndarray:
    """Rotate (counter-clockwise) then scale the patch pixels.

    Integer scales replicate pixels; other scales use bilinear resampling.
    """
    px = np.rot90(patch.pixels, k=placement.rotation // 90, axes=(1, 2))
    sc = placement.scale
    if sc == 1:
        return np.ascontiguousarray(px)
    if float(sc).is_integer():
        n = int(sc)
        return np.repeat(np.repeat(px, n, axis=1), n, axis=2)
    h = int(round(px.shape[1] * sc))
    w = int(round(px.shape[2] * sc))
    if h < 1 or w < 1:
        raise PlacementError(f"scale {sc} shrinks the patch to nothing")
    out = ndimage.zoom(px, (1, h / px.shape[1], w / px.shape[2]), order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0, 1).astype(np.float32)


def footprint(patch: Patch, placement: Placement) -> RegionRect:
    ph, pw = patch.size
    if placement.rotation in (90, 270):
        ph, pw = pw, ph
    if float(placement.scale).is_integer():
        h, w = ph * int(placement.scale), pw * int(placement.scale)
    else:
        h, w = int(round(ph * placement.scale)), int(round(pw * placement.scale))
    if h < 1 or w < 1:
        raise PlacementError(f"scale {placement.scale} shrinks the patch to nothing")
    return RegionRect(placement.row, placement.col, h, w, 0)


def check_placement(patch: Patch, placement: Placement, image_shape) -> RegionRect:
    box = footprint(patch, placement)
    _, h, w = image_shape
    if box.top < 0 or box.left < 0 or box.bottom >= h or box.right >= w:
        raise PlacementError(f"patch footprint {box} exceeds {h}x{w} image")
    return box


def apply_patch(patch: Patch, x: np.ndarray, placement: Placement) -> np.ndarray:
    box = check_placement(patch, placement, x.shape)
    if patch.pixels.shape[0] != x.shape[0]:
        raise PlacementError("patch and image channel counts differ")
    out = x.copy()
    rs, cs = box.slices()
    out[:, rs, cs] = transform_patch(patch, placement)
    return out


def patch_gradient(grad_x: np.ndarray, patch: Patch, placement: Placement) -> np.ndarray:
    """Pull an image gradient back onto the (untransformed) patch pixels."""
    box = footprint(patch, placement)
    rs, cs = box.slices()
    g = grad_x[:, rs, cs]
    if not float(placement.scale).is_integer():
        raise NotImplementedError("patch gradients need an integer scale")
    n = int(placement.scale)
    if n > 1:
        c, h, w = g.shape
        g = g.reshape(c, h // n, n, w // n, n).sum(axis=(2, 4))
    return np.rot90(g, k=-(placement.rotation // 90), axes=(1, 2))


def random_placement(rng: np.random.Generator, patch: Patch, image_shape, rotations=ROTATIONS,
                     within: RegionRect | None = None) -> Placement:
    rot = int(rng.choice(rotations))
    box = footprint(patch, Placement(0, 0, rot))
    _, h, w = image_shape
    top, left, bottom, right = 0, 0, h - 1, w - 1
    if within is not None:
        top, left, bottom, right = within.top, within.left, within.bottom, within.right
    r_hi = min(bottom - box.height + 1, h - box.height)
    c_hi = min(right - box.width + 1, w - box.width)
    r_lo, c_lo = max(top, 0), max(left, 0)
    if r_hi < r_lo or c_hi < c_lo:
        r_lo, r_hi = 0, h - box.height
        c_lo, c_hi = 0, w - box.width
    return Placement(int(rng.integers(r_lo, r_hi + 1)), int(rng.integers(c_lo, c_hi + 1)), rot)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------

def _first_conv(net: Network) -> Conv:
    layer = net.layers[0]
    if not isinstance(layer, Conv):
        raise ValueError("activation penalty needs a conv first layer")
    return layer


def activation_penalty(net: Network, x_p: np.ndarray, box: RegionRect | None) -> tuple[float, np.ndarray]:
    """Sum of |first-layer weights applied to the patch pixels| and its input gradient.

    Only the pixels inside ``box`` feed the convolution (bias excluded), so the
    sum runs over exactly the first-layer cells the patch touches.
    """
    if box is None:
        return 0.0, np.zeros_like(x_p)
    conv = _first_conv(net)
    m = np.zeros_like(x_p)
    rs, cs = box.slices()
    m[:, rs, cs] = 1
    z = conv_valid(pad_hw((x_p * m).astype(np.float64), conv.p), conv.weight.astype(np.float64),
                   np.zeros(conv.out_ch), conv.s)
    g = conv_backward_input(np.sign(z), conv.weight.astype(np.float64), conv.s, conv.p, x_p.shape[1:])
    return float(np.abs(z).sum()), (g * m).astype(x_p.dtype)


def attack_loss(net: Network, x_p: np.ndarray, y_p: int, alpha: float,
                box: RegionRect | None = None) -> float:
    """-log softmax(h(x_p))[y_p] + alpha * activation_penalty."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    ce = float(-log_softmax(forward(net, x_p).logits)[y_p])
    if alpha == 0:
        return ce
    pen, _ = activation_penalty(net, x_p, box)
    return ce + alpha * pen


def attack_loss_and_grad(net: Network, x_p: np.ndarray, y_p: int, alpha: float,
                         box: RegionRect | None = None) -> tuple[float, np.ndarray]:
    trace = forward(net, x_p)
    loss = CrossEntropyLoss(y_p)
    value = loss.value(trace)
    grad = backward(net, trace, loss.seed(trace))
    if alpha:
        pen, pen_grad = activation_penalty(net, x_p, box)
        value += alpha * pen
        grad = grad + alpha * pen_grad
    return value, grad


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class AttackConfig:
    target: int
    images: np.ndarray  # (N, C, H, W) clean images
    labels: np.ndarray  # (N,) true labels
    patch_size: tuple[int, int] = (8, 8)
    alpha: float = 0.0
    steps: int = 200
    step_size: float = 2 / 255 * 4
    batch_size: int = 16
    seed: int = 0
    rotations: tuple = ROTATIONS
    regions: list | None = None  # optional per-image RegionRect restricting placement
    eval_placements: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if len(self.images) == 0:
            raise ValueError("attack needs at least one clean image")


@dataclass
class TrainResult:
    patch: Patch
    success_rate: float
    base_rate: float
    log: list = field(default_factory=list)
    eval_indices: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"success_rate": self.success_rate, "base_rate": self.base_rate, "log": self.log}


def attackable_indices(net: Network, images, labels, target: int) -> list[int]:
    """Images the net already classifies correctly and whose label is not the target."""
    out = []
    for i, (x, y) in enumerate(zip(images, labels)):
        if y != target and forward(net, x).label == y:
            out.append(i)
    return out


def success_rate(net: Network, patch: Patch | None, images, indices, target: int, seed: int,
                 rotations=ROTATIONS, regions=None, placements: int = 1) -> float:
    """Fraction of (image, random placement) pairs classified as ``target``.

    With ``patch=None`` the images are evaluated unpatched (the base rate).
    """
    if not indices:
        return 0.0
    rng = np.random.default_rng(seed)
    hits = total = 0
    for i in indices:
        for _ in range(placements):
            x = images[i]
            if patch is not None:
                within = None if regions is None else regions[i]
                x = apply_patch(patch, x, random_placement(rng, patch, x.shape, rotations, within))
            hits += forward(net, x).label == target
            total += 1
    return hits / total


def train_patch(net: Network, cfg: AttackConfig, init: Patch | None = None) -> TrainResult:
    """Sign-gradient descent on the attack loss over random images and placements."""
    rng = np.random.default_rng(cfg.seed)
    images = np.asarray(cfg.images, dtype=np.float32)
    c = images.shape[1]
    idx = attackable_indices(net, images, cfg.labels, cfg.target)
    pool = idx or list(range(len(images)))
    patch = init if init is not None else Patch.random(rng, c, *cfg.patch_size)
    px = patch.pixels.copy()
    history = []
    for step in range(cfg.steps):
        batch = rng.choice(pool, size=min(cfg.batch_size, len(pool)), replace=False)
        grad = np.zeros_like(px)
        total = 0.0
        cur = Patch(px)
        for i in batch:
            within = None if cfg.regions is None else cfg.regions[i]
            pl = random_placement(rng, cur, images[i].shape, cfg.rotations, within)
            x_p = apply_patch(cur, images[i], pl)
            value, g = attack_loss_and_grad(net, x_p, cfg.target, cfg.alpha, footprint(cur, pl))
            total += value
            grad += patch_gradient(g, cur, pl)
        px = np.clip(px - cfg.step_size * np.sign(grad), 0, 1).astype(np.float32)
        history.append({"step": step, "loss": total / len(batch)})
    patch = Patch(px)
    eval_seed = cfg.seed + 1
    rate = success_rate(net, patch, images, idx, cfg.target, eval_seed, cfg.rotations, cfg.regions,
                        cfg.eval_placements)
    base = success_rate(net, None, images, idx, cfg.target, eval_seed)
    history.append({"step": cfg.steps, "success_rate": rate, "base_rate": base})
    log.info("patch training done: success %.3f (base %.3f)", rate, base)
    return TrainResult(patch, rate, base, history, idx)
