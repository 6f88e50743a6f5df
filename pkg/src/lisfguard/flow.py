"""Block-matching optical flow and forward warping.

A flow field is a ``(2, H, W)`` float32 array: channel 0 holds ``dx`` (column
displacement), channel 1 holds ``dy`` (row displacement).  A pixel at
``(y, x)`` in the earlier frame moves to ``(y + dy, x + dx)`` in the later one.
"""
from __future__ import annotations

import math

import numpy as np

from .lisf import CandidateBox


def zero_flow(h: int, w: int) -> np.ndarray:
    return np.zeros((2, h, w), dtype=np.float32)


def uniform_flow(h: int, w: int, dx: float, dy: float) -> np.ndarray:
    f = zero_flow(h, w)
    f[0], f[1] = dx, dy
    return f


def _gray(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=0) if x.ndim == 3 else x


def _displacements(radius: int) -> list[tuple[int, int]]:
    """All (dx, dy) in the search square, smallest magnitude first then lexicographic."""
    d = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    return sorted(d, key=lambda v: (v[0] * v[0] + v[1] * v[1], v[0], v[1]))


def estimate_flow(prev: np.ndarray, nxt: np.ndarray, block: int = 8, radius: int = 4) -> np.ndarray:
    """Per-block integer displacement minimizing the mean absolute difference.

    Blocks tile the frame (edge blocks may be smaller).  A displacement is
    scored on the part of the shifted block that stays inside the frame and
    needs at least half of the block to remain.  Exact ties go to the smaller
    displacement, then lexicographic ``(dx, dy)``.
    """
    if np.shape(prev) != np.shape(nxt):
        raise ValueError(f"frame shapes differ: {np.shape(prev)} vs {np.shape(nxt)}")
    p, n = _gray(prev), _gray(nxt)
    h, w = p.shape
    if block < 1 or block > min(h, w):
        raise ValueError(f"block {block} does not fit a {h}x{w} frame")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    bh, bw = math.ceil(h / block), math.ceil(w / block)
    ph, pw = bh * block, bw * block

    def block_sum(a):
        return a.reshape(bh, block, bw, block).sum(axis=(1, 3))

    inside = np.zeros((ph, pw))
    inside[:h, :w] = 1
    block_pixels = block_sum(inside)

    best = np.full((bh, bw), np.inf)
    flow_b = np.zeros((2, bh, bw))
    for dx, dy in _displacements(radius):
        diff = np.zeros((ph, pw))
        valid = np.zeros((ph, pw))
        y0, y1 = max(0, -dy), min(h, h - dy)
        x0, x1 = max(0, -dx), min(w, w - dx)
        if y1 <= y0 or x1 <= x0:
            continue
        diff[y0:y1, x0:x1] = np.abs(p[y0:y1, x0:x1] - n[y0 + dy:y1 + dy, x0 + dx:x1 + dx])
        valid[y0:y1, x0:x1] = 1
        count = block_sum(valid)
        with np.errstate(invalid="ignore", divide="ignore"):
            cost = np.where(2 * count >= block_pixels, block_sum(diff) / count, np.inf)
        better = cost < best
        best[better] = cost[better]
        flow_b[0][better], flow_b[1][better] = dx, dy
    full = np.repeat(np.repeat(flow_b, block, axis=1), block, axis=2)[:, :h, :w]
    return full.astype(np.float32)


def _check_flow(flow: np.ndarray, hw) -> None:
    if flow.shape != (2, *hw):
        raise ValueError(f"flow {flow.shape} does not match spatial size {tuple(hw)}")


def warp_image(src: np.ndarray, flow: np.ndarray, mode: str = "nearest") -> np.ndarray:
    """Forward-warp ``src`` (C, H, W) along ``flow``.

    Every source pixel is splatted to its displaced position (one target for
    ``nearest``, four bilinear targets otherwise).  Targets are normalized by
    the total weight received; cells that receive nothing keep their ``src``
    value.
    """
    src = np.asarray(src)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[None]
    c, h, w = src.shape
    _check_flow(flow, (h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    ty = yy + flow[1].astype(np.float64)
    tx = xx + flow[0].astype(np.float64)
    acc = np.zeros((c, h * w))
    wsum = np.zeros(h * w)
    vals = src.reshape(c, -1).astype(np.float64)

    def splat(ry, rx, wt):
        ok = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w) & (wt > 0)
        idx = (ry * w + rx)[ok]
        np.add.at(wsum, idx, wt[ok])
        for ch in range(c):
            np.add.at(acc[ch], idx, vals[ch][ok.reshape(-1)] * wt[ok])

    if mode == "nearest":
        ry = np.floor(ty + 0.5).astype(np.int64).reshape(-1)
        rx = np.floor(tx + 0.5).astype(np.int64).reshape(-1)
        splat(ry, rx, np.ones(h * w))
    elif mode == "bilinear":
        y0, x0 = np.floor(ty), np.floor(tx)
        fy, fx = (ty - y0).reshape(-1), (tx - x0).reshape(-1)
        y0, x0 = y0.astype(np.int64).reshape(-1), x0.astype(np.int64).reshape(-1)
        for oy, wy in ((0, 1 - fy), (1, fy)):
            for ox, wx in ((0, 1 - fx), (1, fx)):
                splat(y0 + oy, x0 + ox, wy * wx)
    else:
        raise ValueError(f"unknown warp mode {mode!r}")
    out = vals.copy()
    hit = wsum > 0
    out[:, hit] = acc[:, hit] / wsum[hit]
    out = out.reshape(c, h, w).astype(src.dtype)
    return out[0] if squeeze else out


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def median_vector(flow: np.ndarray, box) -> tuple[float, float]:
    rs = slice(box.top, box.top + box.height)
    cs = slice(box.left, box.left + box.width)
    return float(np.median(flow[0, rs, cs])), float(np.median(flow[1, rs, cs]))


def warp_box(box: CandidateBox, flow: np.ndarray) -> CandidateBox:
    """Shift ``box`` by the rounded median flow inside it, clamped to the frame."""
    _, h, w = flow.shape
    if box.top < 0 or box.left < 0 or box.top + box.height > h or box.left + box.width > w:
        raise ValueError(f"box {box} outside {h}x{w} frame")
    dx, dy = median_vector(flow, box)
    top = min(max(box.top + _round_half_up(dy), 0), h - box.height)
    left = min(max(box.left + _round_half_up(dx), 0), w - box.width)
    return CandidateBox(top, left, box.height, box.width, None)


def resize_flow(flow: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbor resample to ``size = (h, w)``; vectors scaled by the size ratio."""
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    _, H, W = flow.shape
    if (h, w) == (H, W):
        return flow.copy()
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    out = flow[:, rows][:, :, cols].astype(np.float64)
    out[0] *= w / W
    out[1] *= h / H
    return out.astype(np.float32)


def warp_features(fmap: np.ndarray, flow: np.ndarray, mode: str = "bilinear") -> np.ndarray:
    """Warp every channel of a feature map; ``flow`` must already match its size."""
    if fmap.ndim != 3:
        raise ValueError("feature map must be (C, H, W)")
    _check_flow(flow, fmap.shape[1:])
    return warp_image(fmap, flow, mode)


def sad(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).sum())
