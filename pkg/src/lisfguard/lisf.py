"""Localized important superficial features (LISF).

Candidate adversarial regions are found on the first layer's output: cells
above ``beta * max`` of the channel-summed heat map are marked important, every
``S x S`` window (stride 1) with more than ``theta * S**2`` important cells is
kept, overlapping windows are merged, and the survivors are mapped back to
input pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_net import ActivationTrace, Network, forward, forward_range

DEFAULT_BETA = 0.75
DEFAULT_THETA = 0.85
DEFAULT_OVERLAP = 0.30


@dataclass(frozen=True)
class ImportantMap:
    mask: np.ndarray  # bool (H, W)
    source_shape: tuple
    beta: float

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True)
class Window:
    """S x S window on the first-layer feature map."""

    row: int
    col: int
    size: int
    count: int = 0

    @property
    def center(self) -> tuple[float, float]:
        half = (self.size - 1) / 2
        return self.row + half, self.col + half

    def overlap(self, other: "Window") -> int:
        dr = min(self.row + self.size, other.row + other.size) - max(self.row, other.row)
        dc = min(self.col + self.size, other.col + other.size) - max(self.col, other.col)
        return max(dr, 0) * max(dc, 0)


@dataclass(frozen=True)
class CandidateBox:
    """Candidate adversarial region in input pixel coordinates."""

    top: int
    left: int
    height: int
    width: int
    window: Window | None = None

    @property
    def area(self) -> int:
        return self.height * self.width

    def to_dict(self) -> dict:
        d = {"top": self.top, "left": self.left, "height": self.height, "width": self.width}
        if self.window is not None:
            d["window"] = {"row": self.window.row, "col": self.window.col,
                           "size": self.window.size, "score": self.window.count}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateBox":
        w = d.get("window")
        win = None if w is None else Window(w["row"], w["col"], w["size"], w.get("score", 0))
        return cls(d["top"], d["left"], d["height"], d["width"], win)


def heat_map(fm: np.ndarray) -> np.ndarray:
    fm = np.asarray(fm)
    if fm.size == 0:
        raise ValueError("empty feature map")
    return fm.sum(axis=0) if fm.ndim == 3 else fm


def important_map(first_layer_fm: np.ndarray, beta: float = DEFAULT_BETA) -> ImportantMap:
    if not 0 < beta < 1:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    heat = heat_map(first_layer_fm)
    peak = heat.max()
    if peak <= 0:
        # nothing positive to call important
        mask = np.zeros(heat.shape, dtype=bool)
    else:
        mask = heat > beta * peak
    return ImportantMap(mask, tuple(np.shape(first_layer_fm)), beta)


def window_counts(mask: np.ndarray, size: int) -> np.ndarray:
    """Important-cell count of every ``size x size`` window, by incremental column updates.

    Moving a window one column right subtracts its leftmost column and adds
    the column entering on the right.
    """
    mask = np.asarray(mask, dtype=np.int64)
    h, w = mask.shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"window size {size} does not fit a {h}x{w} map")
    out = np.empty((h - size + 1, w - size + 1), dtype=np.int64)
    for i in range(h - size + 1):
        col = mask[i:i + size].sum(axis=0)
        c = int(col[:size].sum())
        out[i, 0] = c
        for j in range(w - size):
            c += int(col[j + size]) - int(col[j])
            out[i, j + 1] = c
    return out


def find_important_windows(imap: ImportantMap | np.ndarray, size: int,
                           theta: float = DEFAULT_THETA) -> list[Window]:
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    mask = imap.mask if isinstance(imap, ImportantMap) else np.asarray(imap, dtype=bool)
    counts = window_counts(mask, size)
    rows, cols = np.nonzero(counts > theta * size * size)
    return [Window(int(r), int(c), size, int(counts[r, c])) for r, c in zip(rows, cols)]


def overlap_groups(windows: list[Window], overlap_fraction: float = DEFAULT_OVERLAP) -> list[list[int]]:
    """Connected components of the "overlap above threshold" graph (index lists)."""
    n = len(windows)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(n):
        for b in range(a + 1, n):
            lim = overlap_fraction * windows[a].size * windows[b].size
            if windows[a].overlap(windows[b]) > lim:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for a in range(n):
        groups.setdefault(find(a), []).append(a)
    return list(groups.values())


def dedup_overlaps(windows: list[Window], overlap_fraction: float = DEFAULT_OVERLAP) -> list[Window]:
    """One representative per overlap group: the window whose center is nearest
    the group's centroid, ties to the smallest (row, col)."""
    if not windows:
        return []
    sizes = {w.size for w in windows}
    if len(sizes) != 1:
        raise ValueError("windows must share one size")
    kept = []
    for group in overlap_groups(windows, overlap_fraction):
        members = [windows[i] for i in group]
        cy = np.mean([m.center[0] for m in members])
        cx = np.mean([m.center[1] for m in members])
        best = min(members, key=lambda m: ((m.center[0] - cy) ** 2 + (m.center[1] - cx) ** 2, m.row, m.col))
        kept.append(best)
    kept.sort(key=lambda w: (w.row, w.col))
    return kept


def first_layer_geometry(net: Network) -> tuple[int, int, int]:
    layer = net.layers[net.first_conv_index()]
    return layer.k, layer.s, layer.p


def map_to_input(window: Window, net: Network) -> CandidateBox:
    k, s, p = first_layer_geometry(net)
    _, h, w = net.input_shape
    r0 = window.row * s - p
    r1 = (window.row + window.size - 1) * s - p + k - 1
    c0 = window.col * s - p
    c1 = (window.col + window.size - 1) * s - p + k - 1
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, h - 1), min(c1, w - 1)
    return CandidateBox(r0, c0, r1 - r0 + 1, c1 - c0 + 1, window)


def default_window_size(net: Network, max_patch_side: int) -> int:
    _, s, _ = first_layer_geometry(net)
    return int(math.ceil(max_patch_side / s))


def first_layer_features(net: Network, x_or_trace) -> np.ndarray:
    idx = net.feature_layer_index()
    if isinstance(x_or_trace, ActivationTrace):
        return x_or_trace.outputs[idx]
    return forward_range(net, x_or_trace, 0, idx + 1)


def search_candidates(net: Network, x_or_trace, window_size: int, beta: float = DEFAULT_BETA,
                      theta: float = DEFAULT_THETA,
                      overlap_fraction: float = DEFAULT_OVERLAP) -> list[CandidateBox]:
    """Full search: important map, windows, dedup, mapping to input boxes."""
    fm = first_layer_features(net, x_or_trace)
    imap = important_map(fm, beta)
    size = min(window_size, *imap.shape)
    windows = dedup_overlaps(find_important_windows(imap, size, theta), overlap_fraction)
    return [map_to_input(w, net) for w in windows]


# --------------------------------------------------------------------------
# Characterization statistics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterStats:
    top_k: int
    distance_std: float
    n_clusters: int
    bandwidth: float

    def to_dict(self) -> dict:
        return {"top_k": self.top_k, "distance_std": self.distance_std,
                "n_clusters": self.n_clusters, "bandwidth": self.bandwidth}


def top_k_cells(heat: np.ndarray, top_k: int) -> np.ndarray:
    """(row, col) of the ``top_k`` largest cells; ties go to the lower flat index."""
    flat = heat.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:top_k]
    return np.stack(np.unravel_index(order, heat.shape), axis=1).astype(np.float64)


def mean_shift_modes(points: np.ndarray, bandwidth: float, max_iter: int = 300,
                     tol: float = 1e-3) -> np.ndarray:
    """Flat-kernel mean shift seeded at every point; near-duplicate modes merged.

    Modes are merged greedily in order of decreasing support (points within
    ``bandwidth``), dropping any mode within ``bandwidth`` of one already kept.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return np.empty((0, pts.shape[1] if pts.ndim == 2 else 2))
    modes = pts.copy()
    for _ in range(max_iter):
        d2 = ((modes[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        near = d2 <= bandwidth * bandwidth
        new = (near[:, :, None] * pts[None]).sum(1) / near.sum(1, keepdims=True)
        shift = np.abs(new - modes).max()
        modes = new
        if shift < tol:
            break
    d2 = ((modes[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    support = (d2 <= bandwidth * bandwidth).sum(1)
    uniq, idx = np.unique(np.round(modes, 6), axis=0, return_index=True)
    cand = modes[idx]
    sup = support[idx]
    order = sorted(range(len(cand)), key=lambda i: (-sup[i], tuple(cand[i])))
    kept = []
    for i in order:
        if all(np.linalg.norm(cand[i] - cand[j]) >= bandwidth for j in kept):
            kept.append(i)
    return cand[kept]


def cluster_stats(fm: np.ndarray, top_k: int, bandwidth: float) -> ClusterStats:
    heat = heat_map(fm)
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if top_k > heat.size:
        raise ValueError(f"top_k {top_k} exceeds {heat.size} cells")
    pts = top_k_cells(heat, top_k)
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1)
    modes = mean_shift_modes(pts, bandwidth)
    return ClusterStats(top_k, float(dist.std()), int(len(modes)), float(bandwidth))
