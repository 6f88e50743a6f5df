"""Roofline latency and access-count energy for a small spatial accelerator.

Each layer takes ``max(compute cycles, DRAM cycles)``; layers run back to
back.  Compute cycles are MACs spread over every PE.  DRAM traffic is the
layer's input, weights and output, each moved once.  For a masked
recomputation only the affected rects move, except the weights, and the
benign border ring comes from the masked-neuron buffer.  Whatever part of a
ring does not fit that buffer spills and is re-read over DRAM.

Energies are relative units (one MAC = 1).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .region import RegionRect, RegionTrace, as_region, layer_macs, trace_regions
from .tensor_net import (GLOBAL, Conv, FullyConnected, GlobalAvgPool, MaxPool, Network, ReLU,
                         conv_out_size)


@dataclass(frozen=True)
class HwConfig:
    array_grid: tuple = (2, 2)
    pe_grid: tuple = (24, 24)  # per array
    glb_bytes: int = 64 * 1024  # per array
    rf_bytes: int = 256  # per PE
    dram_bytes_per_s: float = 26e9
    mnb_bytes: int = 8 * 1024  # per array
    bytes_per_value: int = 1
    clock_hz: float = 1e9
    utilization: float = 1.0
    search_ops_per_cycle: float = 1.0
    e_mac: float = 1.0
    e_rf: float = 1.0
    e_glb: float = 6.0
    e_dram: float = 200.0

    def __post_init__(self):
        vals = [*self.array_grid, *self.pe_grid, self.glb_bytes, self.rf_bytes, self.dram_bytes_per_s,
                self.mnb_bytes, self.bytes_per_value, self.clock_hz, self.search_ops_per_cycle,
                self.e_mac, self.e_rf, self.e_glb, self.e_dram]
        if any(not v > 0 for v in vals) or not 0 < self.utilization <= 1:
            raise ValueError("hardware parameters must be positive (utilization in (0, 1])")

    @property
    def arrays(self) -> int:
        return self.array_grid[0] * self.array_grid[1]

    @property
    def total_pes(self) -> int:
        return self.arrays * self.pe_grid[0] * self.pe_grid[1]

    @property
    def dram_bytes_per_cycle(self) -> float:
        return self.dram_bytes_per_s / self.clock_hz

    def compute_cycles(self, ops: float) -> int:
        return int(math.ceil(ops / (self.total_pes * self.utilization)))

    def dram_cycles(self, nbytes: float) -> int:
        return int(math.ceil(nbytes / self.dram_bytes_per_cycle))

    @classmethod
    def from_dict(cls, d: dict) -> "HwConfig":
        d = dict(d)
        for key in ("array_grid", "pe_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LayerCost:
    index: int
    kind: str
    macs: int
    compute_cycles: int
    dram_bytes: int
    dram_cycles: int
    mnb_bytes: int = 0
    spill_bytes: int = 0

    @property
    def cycles(self) -> int:
        return max(self.compute_cycles, self.dram_cycles)

    @property
    def bottleneck(self) -> str:
        return "compute" if self.compute_cycles >= self.dram_cycles else "bandwidth"

    def energy(self, hw: HwConfig) -> float:
        # three register-file touches per MAC (weight, input, partial sum) and one
        # global-buffer read or write for every value moved through DRAM
        return (self.macs * (hw.e_mac + 3 * hw.e_rf) + self.dram_bytes * (hw.e_dram + hw.e_glb)
                + self.mnb_bytes * hw.e_glb)

    def to_dict(self, hw: HwConfig) -> dict:
        d = asdict(self)
        d.update(cycles=self.cycles, bottleneck=self.bottleneck, energy=self.energy(hw))
        return d


def _values(shape) -> int:
    return int(np.prod(shape))


def _weight_values(layer) -> int:
    if isinstance(layer, Conv):
        return layer.out_ch * (layer.in_ch * layer.k * layer.k + 1)
    if isinstance(layer, FullyConnected):
        return layer.out_features * (layer.in_features + 1)
    return 0


def layer_cost(layer, in_shape, out_shape, hw: HwConfig, region: RegionRect | None = None,
               in_region: RegionRect | None = None, ring_values: int = 0, mnb_free: int | None = None,
               index: int = 0) -> LayerCost:
    """Cost of one layer over its whole output, or only over ``region``.

    ``in_region`` is the recomputed part of the input (read from DRAM);
    ``ring_values`` more input values come from the masked-neuron buffer, of
    which at most ``mnb_free`` bytes fit before spilling.
    """
    bpv = hw.bytes_per_value
    if region is None:
        out_vals = _values(out_shape)
        in_vals = _values(in_shape)
    else:
        ch = out_shape[0] if region.spatial and len(out_shape) == 3 else 1
        out_vals = region.area * ch
        if in_region is None:
            in_vals = _values(in_shape)
        else:
            in_vals = in_region.area * (in_shape[0] if in_region.spatial and len(in_shape) == 3 else 1)
    macs = layer_macs(layer, out_vals, in_shape)
    if isinstance(layer, ReLU):
        # fused into the producing layer: no extra traffic
        return LayerCost(index, layer.kind, 0, 0, 0, 0)
    ring_bytes = ring_values * bpv
    cap = hw.mnb_bytes if mnb_free is None else mnb_free
    spill = max(0, ring_bytes - cap)
    traffic = (in_vals + _weight_values(layer) + out_vals) * bpv + spill
    return LayerCost(index, layer.kind, macs, hw.compute_cycles(macs), traffic, hw.dram_cycles(traffic),
                     ring_bytes - spill, spill)


@dataclass
class CostReport:
    name: str
    layers: list
    search_cycles: int = 0
    vote_cycles: int = 0
    hw: HwConfig = field(default_factory=HwConfig)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def cycles(self) -> int:
        return sum(l.cycles for l in self.layers)

    @property
    def dram_bytes(self) -> int:
        return sum(l.dram_bytes for l in self.layers)

    @property
    def energy(self) -> float:
        return sum(l.energy(self.hw) for l in self.layers) + (self.search_cycles + self.vote_cycles) * self.hw.e_rf

    @property
    def seconds(self) -> float:
        return self.cycles / self.hw.clock_hz

    @property
    def peak_mnb_bytes(self) -> int:
        return max((l.mnb_bytes + l.spill_bytes for l in self.layers), default=0)

    @property
    def overflow(self) -> bool:
        return any(l.spill_bytes for l in self.layers)

    def to_dict(self) -> dict:
        return {"name": self.name, "macs": self.macs, "cycles": self.cycles, "seconds": self.seconds,
                "dram_bytes": self.dram_bytes, "energy": self.energy,
                "search_cycles": self.search_cycles, "vote_cycles": self.vote_cycles,
                "peak_mnb_bytes": self.peak_mnb_bytes, "mnb_overflow": self.overflow,
                "layers": [l.to_dict(self.hw) for l in self.layers]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["index", "kind", "macs", "compute_cycles", "dram_bytes", "dram_cycles", "cycles",
                "bottleneck", "mnb_bytes", "spill_bytes", "energy"]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for l in self.layers:
            w.writerow(l.to_dict(self.hw))
        return buf.getvalue()


def search_cycles(net: Network, hw: HwConfig) -> int:
    """One incremental window update per first-layer output cell."""
    shape = net.out_shape(net.first_conv_index())
    return int(math.ceil(shape[1] * shape[2] / hw.search_ops_per_cycle))


def vote_cycles(k: int) -> int:
    return k * (k + 1) // 2


def inference_cost(net: Network, hw: HwConfig | None = None, trace: RegionTrace | None = None,
                   search: bool = False, votes: int | None = None, name: str | None = None) -> CostReport:
    """Full inference, or (with ``trace``) the masked recomputation it describes."""
    hw = hw or HwConfig()
    layers = []
    for i, layer in enumerate(net.layers):
        ins, outs = net.in_shape(i), net.out_shape(i)
        if trace is None or i >= trace.global_index:
            layers.append(layer_cost(layer, ins, outs, hw, index=i))
            continue
        rect = trace.affected[i + 1]
        if rect is None:
            layers.append(LayerCost(i, layer.kind, 0, 0, 0, 0))
            continue
        layers.append(layer_cost(layer, ins, outs, hw, rect, trace.affected[i], trace.ring_elements[i], index=i))
    return CostReport(name or net.name, layers, search_cycles(net, hw) if search else 0,
                      vote_cycles(votes) if votes is not None else 0, hw)


def masked_cost(net: Network, box, hw: HwConfig | None = None) -> CostReport:
    return inference_cost(net, hw, trace_regions(net, as_region(box)))


def latency_reduction(net: Network, box, hw: HwConfig | None = None) -> float:
    hw = hw or HwConfig()
    return 1.0 - masked_cost(net, box, hw).cycles / inference_cost(net, hw).cycles


@dataclass
class MNBReport:
    peak_bytes: int
    capacity_bytes: int
    feasible: bool
    per_layer_bytes: list
    spill_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def mnb_feasibility(trace: RegionTrace, hw: HwConfig | None = None) -> MNBReport:
    """Does every layer's border ring fit one array's masked-neuron buffer?"""
    hw = hw or HwConfig()
    per = [e * hw.bytes_per_value for e in trace.ring_elements]
    peak = max(per, default=0)
    spill = sum(max(0, b - hw.mnb_bytes) for b in per)
    return MNBReport(peak, hw.mnb_bytes, peak <= hw.mnb_bytes, per, spill)


# --------------------------------------------------------------------------
# Video schedules
# --------------------------------------------------------------------------

def flow_cycles(shape, radius: int, hw: HwConfig) -> int:
    """Block matching does one absolute-difference accumulate per pixel per displacement."""
    _, h, w = shape
    return hw.compute_cycles((2 * radius + 1) ** 2 * h * w)


@dataclass
class ScheduleCost:
    frames: int
    cycles: int
    energy: float
    seconds: float
    fps: float
    breakdown: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _range_cost(net: Network, hw: HwConfig, start: int, stop: int) -> tuple[int, float]:
    rep = inference_cost(net, hw)
    part = rep.layers[start:stop]
    return sum(l.cycles for l in part), sum(l.energy(hw) for l in part)


def pipeline_cost(schedule, net: Network, hw: HwConfig | None = None, flow_radius: int = 6,
                  split: int | None = None) -> ScheduleCost:
    """Model a pipeline run from its per-frame work descriptors.

    A descriptor has ``full`` (full inferences), ``masked`` (boxes recomputed
    with reuse), ``search``/``vote`` flags, ``flow`` flag, and ``prefix`` /
    ``suffix`` counts (network halves split after layer ``split``).
    """
    hw = hw or HwConfig()
    full = inference_cost(net, hw)
    full_e = full.energy
    cut = split if split is not None else len(net.layers)
    pre_c, pre_e = _range_cost(net, hw, 0, cut)
    suf_c, suf_e = _range_cost(net, hw, cut, len(net.layers))
    fcyc = flow_cycles(net.input_shape, flow_radius, hw)
    scyc = search_cycles(net, hw)
    parts = {"full": 0, "masked": 0, "search": 0, "vote": 0, "flow": 0, "prefix": 0, "suffix": 0}
    energy = 0.0
    cache: dict = {}
    n = 0
    for work in schedule:
        n += 1
        parts["full"] += work.get("full", 0) * full.cycles
        energy += work.get("full", 0) * full_e
        for b in work.get("masked", []):
            key = (b["top"], b["left"], b["height"], b["width"])
            if key not in cache:
                cache[key] = masked_cost(net, RegionRect(*key), hw)
            parts["masked"] += cache[key].cycles
            energy += cache[key].energy
        if work.get("search"):
            parts["search"] += scyc
            energy += scyc * hw.e_rf
        if work.get("vote"):
            v = vote_cycles(len(work.get("masked", [])))
            parts["vote"] += v
            energy += v * hw.e_rf
        if work.get("flow"):
            parts["flow"] += fcyc
            energy += fcyc * hw.total_pes * hw.utilization * hw.e_mac
        parts["prefix"] += work.get("prefix", 0) * pre_c
        parts["suffix"] += work.get("suffix", 0) * suf_c
        energy += work.get("prefix", 0) * pre_e + work.get("suffix", 0) * suf_e
    cycles = sum(parts.values())
    seconds = cycles / hw.clock_hz
    return ScheduleCost(n, cycles, energy, seconds, n / seconds if seconds else float("inf"), parts)


# --------------------------------------------------------------------------
# Reference geometries (no weights)
# --------------------------------------------------------------------------

def _stack(input_shape, plan, classes: int, name: str, head=()) -> Network:
    c, h, w = input_shape
    layers = []
    for item in plan:
        if item == "M":
            layers.append(MaxPool(2, 2))
            h, w = h // 2, w // 2
        else:
            out, k, s = item
            p = k // 2
            layers += [Conv(c, out, k, s, p), ReLU()]
            c, h, w = out, conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    feats = c * h * w
    for width in head:
        layers += [FullyConnected(feats, width), ReLU()]
        feats = width
    layers.append(FullyConnected(feats, classes))
    return Network(layers, input_shape, classes, name=name)


def deep_reference(size: int = 224, classes: int = 1000) -> Network:
    """Sixteen 3x3 convs in five pooled stages with a 4096-4096 head (VGG-19 layout)."""
    plan = [(64, 3, 1)] * 2 + ["M"] + [(128, 3, 1)] * 2 + ["M"] + [(256, 3, 1)] * 4 + ["M"] \
        + [(512, 3, 1)] * 4 + ["M"] + [(512, 3, 1)] * 4 + ["M"]
    return _stack((3, size, size), plan, classes, "deep16", head=(4096, 4096))


def shallow_reference(size: int = 224, classes: int = 1000) -> Network:
    """Four 3x3 convs, each followed by a 2x2 pool, with one 256-wide hidden FC layer."""
    plan = [(32, 3, 1), "M", (64, 3, 1), "M", (128, 3, 1), "M", (128, 3, 1), "M"]
    return _stack((3, size, size), plan, classes, "shallow4", head=(256,))


def centered_box(size: int, fraction: float) -> RegionRect:
    side = max(1, int(round(math.sqrt(fraction) * size)))
    top = (size - side) // 2
    return RegionRect(top, top, side, side, 0)
