"""Benign-feature reuse for masked inference.

Zeroing a box of input pixels only disturbs the layer outputs whose receptive
field touches the box.  ``trace_regions`` tracks that affected rectangle layer
by layer together with the ring of unaffected activations a layer needs
around it; ``recompute_masked`` recomputes just the affected rectangles from
the benign activations and splices them back in before the first global
layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_net import (GLOBAL, ActivationTrace, Conv, FullyConnected, GlobalAvgPool,
                         MaxPool, Network, ReLU, layer_output_shape,
                         conv_valid, forward_range, maxpool_valid)


@dataclass(frozen=True)
class RegionRect:
    """Rectangle in one layer's spatial coordinates (inclusive top/left, sizes >= 1).

    For vector-shaped activations ``spatial`` is False and the rect spans the
    whole vector as ``(0, 0, 1, n)``.
    """

    top: int
    left: int
    height: int
    width: int
    layer: int = -1
    spatial: bool = True

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"empty region {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height - 1

    @property
    def right(self) -> int:
        return self.left + self.width - 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def slices(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def intersect(self, other: "RegionRect") -> "RegionRect | None":
        t, l = max(self.top, other.top), max(self.left, other.left)
        b, r = min(self.bottom, other.bottom), min(self.right, other.right)
        if b < t or r < l:
            return None
        return RegionRect(t, l, b - t + 1, r - l + 1, self.layer)

    def to_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "height": self.height,
                "width": self.width, "layer": self.layer, "spatial": self.spatial}


def _window_range(lo: int, hi: int, k: int, s: int, p: int, n_out: int) -> tuple[int, int]:
    # outputs o with o*s - p <= hi and o*s - p + k - 1 >= lo
    o_lo = -((-(lo + p - k + 1)) // s)
    o_hi = (hi + p) // s
    return max(o_lo, 0), min(o_hi, n_out - 1)


def propagate_region(layer, in_rect: RegionRect, in_shape: tuple[int, ...],
                     out_shape: tuple[int, ...] | None = None) -> RegionRect:
    """Smallest output rect holding every cell whose receptive field meets ``in_rect``.

    Returns None when no output reads the rect, which happens only when the
    stride skips over it (``s > k``); a None input propagates as None.
    """
    if in_rect is None:
        return None
    if isinstance(layer, ReLU):
        return RegionRect(in_rect.top, in_rect.left, in_rect.height, in_rect.width,
                          in_rect.layer + 1, in_rect.spatial)
    if isinstance(layer, GLOBAL):
        if out_shape is None:
            out_shape = layer_output_shape(layer, in_shape)
        return RegionRect(0, 0, 1, int(np.prod(out_shape)), in_rect.layer + 1, spatial=False)
    if not in_rect.spatial:
        raise ValueError("spatial layer after a global layer")
    _, h, w = in_shape
    k, s, p = layer.k, layer.s, layer.p
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    r0, r1 = _window_range(in_rect.top, in_rect.bottom, k, s, p, ho)
    c0, c1 = _window_range(in_rect.left, in_rect.right, k, s, p, wo)
    if r1 < r0 or c1 < c0:
        return None
    return RegionRect(r0, c0, r1 - r0 + 1, c1 - c0 + 1, in_rect.layer + 1)


def required_input(layer, out_rect: RegionRect) -> tuple[int, int, int, int]:
    """Input rows/cols ``(r0, r1, c0, c1)`` read to compute ``out_rect``, padding included."""
    k, s, p = layer.k, layer.s, layer.p
    return (out_rect.top * s - p, out_rect.bottom * s - p + k - 1,
            out_rect.left * s - p, out_rect.right * s - p + k - 1)


@dataclass
class RegionTrace:
    """Per-layer affected rects and border rings for one masked input box.

    ``affected[0]`` is the box itself (input coordinates); ``affected[i + 1]``
    is the affected rect of layer ``i``'s output, or None when the stride
    skipped the region entirely.  ``rings[i]`` is the list of
    benign cells (as disjoint rects) of layer ``i``'s input needed beyond
    ``affected[i]``.  ``global_index`` is the first layer without spatial
    locality (everything from there on is recomputed in full).
    """

    box: RegionRect
    affected: list
    rings: list
    ring_cells: list
    ring_elements: list
    affected_elements: list
    global_index: int

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_dict(),
            "affected": [None if r is None else r.to_dict() for r in self.affected],
            "rings": [[r.to_dict() for r in ring] for ring in self.rings],
            "ring_cells": list(self.ring_cells),
            "ring_elements": list(self.ring_elements),
            "affected_elements": list(self.affected_elements),
            "global_index": self.global_index,
        }


def _rect_difference(outer: RegionRect, inner: RegionRect | None) -> list[RegionRect]:
    """Split ``outer \\ inner`` into at most four disjoint rects."""
    if inner is None:
        return [outer]
    inner = outer.intersect(inner)
    if inner is None:
        return [outer]
    parts = []
    layer = outer.layer
    if inner.top > outer.top:
        parts.append(RegionRect(outer.top, outer.left, inner.top - outer.top, outer.width, layer))
    if inner.bottom < outer.bottom:
        parts.append(RegionRect(inner.bottom + 1, outer.left, outer.bottom - inner.bottom, outer.width, layer))
    if inner.left > outer.left:
        parts.append(RegionRect(inner.top, outer.left, inner.height, inner.left - outer.left, layer))
    if inner.right < outer.right:
        parts.append(RegionRect(inner.top, inner.right + 1, inner.height, outer.right - inner.right, layer))
    return parts


def trace_regions(net: Network, input_box: RegionRect) -> RegionTrace:
    c, h, w = net.input_shape
    if input_box.top < 0 or input_box.left < 0 or input_box.bottom >= h or input_box.right >= w:
        raise ValueError(f"box {input_box} outside {h}x{w} input")
    box = RegionRect(input_box.top, input_box.left, input_box.height, input_box.width, 0)
    affected = [box]
    rings, ring_cells, ring_elems = [], [], []
    aff_elems = [box.area * c]
    global_index = len(net.layers)
    for i, layer in enumerate(net.layers):
        in_shape, out_shape = net.in_shape(i), net.out_shape(i)
        prev = affected[-1]
        if isinstance(layer, GLOBAL) and global_index == len(net.layers):
            global_index = i
        if i >= global_index:
            rect = RegionRect(0, 0, 1, int(np.prod(out_shape)), i + 1, spatial=False)
            ring = []
        else:
            rect = propagate_region(layer, prev, in_shape, out_shape)
            ring = []
            if rect is not None and isinstance(layer, (Conv, MaxPool)):
                r0, r1, c0, c1 = required_input(layer, rect)
                _, ih, iw = in_shape
                r0, c0 = max(r0, 0), max(c0, 0)
                r1, c1 = min(r1, ih - 1), min(c1, iw - 1)
                need = RegionRect(r0, c0, r1 - r0 + 1, c1 - c0 + 1, i)
                ring = _rect_difference(need, prev)
        cells = sum(r.area for r in ring)
        rings.append(ring)
        ring_cells.append(cells)
        ring_elems.append(cells * (in_shape[0] if len(in_shape) == 3 else 1))
        affected.append(rect)
        if rect is None:
            aff_elems.append(0)
        else:
            aff_elems.append(rect.area * (out_shape[0] if rect.spatial else 1))
    return RegionTrace(box, affected, rings, ring_cells, ring_elems, aff_elems, global_index)


def _input_window(benign: np.ndarray, prev: RegionRect, prev_vals: np.ndarray,
                  r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    """Benign activations over rows r0..r1 / cols c0..c1 (zero outside bounds) with
    the recomputed ``prev`` rect pasted in."""
    ch, h, w = benign.shape
    win = np.zeros((ch, r1 - r0 + 1, c1 - c0 + 1), dtype=benign.dtype)
    sr0, sr1, sc0, sc1 = max(r0, 0), min(r1, h - 1), max(c0, 0), min(c1, w - 1)
    win[:, sr0 - r0:sr1 - r0 + 1, sc0 - c0:sc1 - c0 + 1] = benign[:, sr0:sr1 + 1, sc0:sc1 + 1]
    view = RegionRect(r0, c0, r1 - r0 + 1, c1 - c0 + 1)
    inter = view.intersect(prev)
    if inter is not None:
        win[:, inter.top - r0:inter.bottom - r0 + 1, inter.left - c0:inter.right - c0 + 1] = \
            prev_vals[:, inter.top - prev.top:inter.bottom - prev.top + 1,
                      inter.left - prev.left:inter.right - prev.left + 1]
    return win


def recompute_masked(net: Network, benign_trace: ActivationTrace, x: np.ndarray, box) -> np.ndarray:
    """Logits of ``x`` with ``box`` zeroed, recomputing only affected regions.

    Equal bit for bit to ``forward(net, mask_region(x, box)).logits``.
    """
    if len(benign_trace.outputs) != len(net.layers) or benign_trace.x.shape != net.input_shape:
        raise ValueError("activation trace does not belong to this network")
    box = as_region(box)
    c = x.shape[0]
    prev = RegionRect(box.top, box.left, box.height, box.width, 0)
    if prev.top < 0 or prev.left < 0 or prev.bottom >= x.shape[1] or prev.right >= x.shape[2]:
        raise ValueError(f"box {box} outside input")
    vals = np.zeros((c, prev.height, prev.width), dtype=x.dtype)
    n = len(net.layers)
    for i, layer in enumerate(net.layers):
        benign_in = x if i == 0 else benign_trace.outputs[i - 1]
        if isinstance(layer, GLOBAL):
            full = benign_in.copy()
            rs, cs = prev.slices()
            full[:, rs, cs] = vals
            return forward_range(net, full, i, n)
        if isinstance(layer, ReLU):
            vals = np.maximum(vals, 0).astype(vals.dtype, copy=False)
            prev = RegionRect(prev.top, prev.left, prev.height, prev.width, i + 1)
            continue
        rect = propagate_region(layer, prev, net.in_shape(i), net.out_shape(i))
        if rect is None:
            # nothing downstream sees the mask
            return benign_trace.logits.copy()
        r0, r1, c0, c1 = required_input(layer, rect)
        win = _input_window(benign_in, prev, vals, r0, r1, c0, c1)
        if isinstance(layer, Conv):
            vals = conv_valid(win, layer.weight, layer.bias, layer.s)
        else:
            vals = maxpool_valid(win, layer.k, layer.s)
        prev = rect
    out = benign_trace.outputs[-1].copy()
    rs, cs = prev.slices()
    out[:, rs, cs] = vals
    return out


def as_region(box) -> RegionRect:
    if isinstance(box, RegionRect):
        return box
    return RegionRect(int(box.top), int(box.left), int(box.height), int(box.width), 0)


# --------------------------------------------------------------------------
# Accounting
# --------------------------------------------------------------------------

def layer_macs(layer, out_elements: int, in_shape) -> int:
    """Multiply-accumulates (comparisons for pooling) to produce ``out_elements`` outputs."""
    if isinstance(layer, Conv):
        return out_elements * layer.in_ch * layer.k * layer.k
    if isinstance(layer, MaxPool):
        return out_elements * layer.k * layer.k
    if isinstance(layer, FullyConnected):
        return out_elements * layer.in_features
    if isinstance(layer, GlobalAvgPool):
        return int(np.prod(in_shape))
    return 0


def full_layer_macs(net: Network, i: int) -> int:
    return layer_macs(net.layers[i], int(np.prod(net.out_shape(i))), net.in_shape(i))


@dataclass
class ReuseReport:
    per_layer: list
    total: float
    full_macs: list
    masked_macs: list


def reuse_ratio(trace: RegionTrace, net: Network) -> ReuseReport:
    """Fraction of each layer's MACs avoided by recomputing only the affected rect."""
    ratios, full, masked = [], [], []
    for i, layer in enumerate(net.layers):
        f = full_layer_macs(net, i)
        m = f if i >= trace.global_index else layer_macs(layer, trace.affected_elements[i + 1], net.in_shape(i))
        full.append(f)
        masked.append(m)
        if i >= trace.global_index:
            ratios.append(0.0)
        elif f:
            ratios.append(1.0 - m / f)
        else:
            # elementwise layer: no MACs, report the element saving
            ratios.append(1.0 - trace.affected_elements[i + 1] / int(np.prod(net.out_shape(i))))
    tf = sum(full)
    total = 1.0 - sum(masked) / tf if tf else 0.0
    return ReuseReport(ratios, total, full, masked)


@dataclass
class MNBAccount:
    per_layer_bytes: list
    peak_bytes: int
    capacity_bytes: int | None = None

    @property
    def fits(self) -> bool | None:
        return None if self.capacity_bytes is None else self.peak_bytes <= self.capacity_bytes

    def to_dict(self) -> dict:
        return {"per_layer_bytes": list(self.per_layer_bytes), "peak_bytes": self.peak_bytes,
                "capacity_bytes": self.capacity_bytes, "fits": self.fits}


def mnb_account(trace: RegionTrace, bytes_per_value: int, capacity_bytes: int | None = None) -> MNBAccount:
    per = [e * bytes_per_value for e in trace.ring_elements]
    return MNBAccount(per, max(per, default=0), capacity_bytes)
