"""Defended video inference.

Two pipelines share one key-frame schedule:

* AO (accuracy oriented) runs the full network on every frame.  Key frames
  get the full defense; on the frames in between, the adversarial box found on
  the last key frame is carried along by optical flow, masked, and the
  masked frame classified.
* PO (performance oriented) runs only the network suffix on non-key frames,
  feeding it the key frame's clean prefix features warped by the flow.

``defense`` is ``off`` (plain inference), ``full`` (every frame treated as a
key frame) or ``amortized`` (key frames only).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .flow import estimate_flow, resize_flow, warp_box, warp_features
from .lisf import (DEFAULT_BETA, DEFAULT_OVERLAP, DEFAULT_THETA, CandidateBox,
                   default_window_size, search_candidates)
from .occlude import Verdict, mask_region, occluding_test, vote
from .tensor_net import Network, forward, forward_range

log = logging.getLogger(__name__)

MODES = ("ao", "po")
DEFENSES = ("off", "full", "amortized")


@dataclass
class PipelineConfig:
    mode: str = "ao"
    defense: str = "amortized"
    key_rate: float = 0.10
    beta: float = DEFAULT_BETA
    theta: float = DEFAULT_THETA
    overlap: float = DEFAULT_OVERLAP
    window: int | None = None  # None: sized for patches up to max_patch_fraction of the side
    max_patch_fraction: float = 0.2
    split_fraction: float = 0.25  # split after the first layer whose side < fraction * input side
    flow_block: int = 8
    flow_radius: int = 6
    feature_warp: str = "bilinear"
    fast_occlusion: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.defense not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES}")
        if not 0 < self.key_rate <= 1:
            raise ValueError("key_rate must lie in (0, 1]")
        if not 0 < self.split_fraction:
            raise ValueError("split_fraction must be positive")

    def window_size(self, net: Network) -> int:
        if self.window is not None:
            return self.window
        side = max(net.input_shape[1:])
        return default_window_size(net, int(np.ceil(self.max_patch_fraction * side)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Counters:
    """How often each stage ran (lets tests assert who did what)."""

    searches: int = 0
    full_inferences: int = 0
    masked_inferences: int = 0
    prefix_runs: int = 0
    suffix_runs: int = 0
    flow_estimates: int = 0
    votes: int = 0


@dataclass
class FrameResult:
    index: int
    is_key: bool
    label: int
    verdict: Verdict | None = None
    candidates: list = field(default_factory=list)  # CandidateBoxes used on this frame
    warped: bool = False  # candidates came from the flow, not a search
    masked_box: CandidateBox | None = None  # adversarial region acted on for this frame
    work: dict = field(default_factory=dict)
    timing: str = "modeled"

    @property
    def flagged(self) -> bool:
        return self.masked_box is not None

    def to_dict(self) -> dict:
        return {"frame": self.index, "is_key": self.is_key, "label": self.label,
                "verdict": None if self.verdict is None else self.verdict.to_dict(),
                "candidates": [c.to_dict() for c in self.candidates], "warped": self.warped,
                "masked_box": None if self.masked_box is None else self.masked_box.to_dict(),
                "work": self.work, "timing": self.timing}


def select_key_frames(n_frames: int, rate: float) -> list[int]:
    if not 0 < rate <= 1:
        raise ValueError("rate must lie in (0, 1]")
    stride = max(1, int(round(1 / rate)))
    return list(range(0, n_frames, stride))


def split_network(net: Network, fraction: float = 0.25) -> tuple[range, range]:
    """Prefix ends at the first layer whose output side drops below ``fraction`` of
    the input side; without such a layer it ends at the last conv."""
    limit = fraction * max(net.input_shape[1:])
    cut = None
    for i in range(len(net.layers)):
        shape = net.out_shape(i)
        if len(shape) == 3 and max(shape[1:]) < limit:
            cut = i
            break
    if cut is None:
        convs = [i for i, shape in enumerate(net.shapes[1:]) if len(shape) == 3]
        cut = convs[-1] if convs else 0
    return range(0, cut + 1), range(cut + 1, len(net.layers))


def _work(**kw) -> dict:
    base = {"full": 0, "masked": [], "search": False, "vote": False, "flow": False,
            "prefix": 0, "suffix": 0}
    base.update(kw)
    return base


class _Defender:
    """Search, occlude and vote on one frame."""

    def __init__(self, net: Network, cfg: PipelineConfig, counters: Counters):
        self.net, self.cfg, self.counters = net, cfg, counters
        self.window = cfg.window_size(net)

    def __call__(self, x: np.ndarray):
        c = self.counters
        trace = forward(self.net, x)
        c.full_inferences += 1
        cands = search_candidates(self.net, trace, self.window, self.cfg.beta, self.cfg.theta, self.cfg.overlap)
        c.searches += 1
        labels = occluding_test(self.net, x, cands, self.cfg.fast_occlusion, trace)
        c.masked_inferences += len(cands)
        verdict = vote(labels)
        c.votes += 1
        box = cands[verdict.candidate - 1] if verdict.adversarial else None
        return trace, cands, verdict, box


def _relabel(verdict) -> tuple | None:
    """(L0, voted) when a benign key frame's majority vote overrode its own prediction.

    Non-key frames that predict L0 inherit the voted label, so a static clip
    reads the same under amortized and every-frame defense.
    """
    if verdict is None or verdict.adversarial or verdict.label == verdict.labels.original:
        return None
    return verdict.labels.original, verdict.label


def _apply(label: int, remap) -> int:
    return remap[1] if remap is not None and label == remap[0] else label


def _check_frames(frames) -> list:
    frames = list(frames)
    if frames and any(f.shape != frames[0].shape for f in frames):
        raise ValueError("all frames must share one shape")
    return frames


def run_ao(frames, net: Network, cfg: PipelineConfig, counters: Counters | None = None) -> list[FrameResult]:
    frames = _check_frames(frames)
    counters = counters if counters is not None else Counters()
    out = []
    if cfg.defense == "off":
        for i, x in enumerate(frames):
            counters.full_inferences += 1
            out.append(FrameResult(i, False, forward(net, x).label, work=_work(full=1)))
        return out
    keys = set(range(len(frames))) if cfg.defense == "full" else set(select_key_frames(len(frames), cfg.key_rate))
    defend = _Defender(net, cfg, counters)
    key_x = tracked = remap = None
    for i, x in enumerate(frames):
        try:
            if i in keys:
                _, cands, verdict, box = defend(x)
                key_x, tracked, remap = x, box, _relabel(verdict)
                out.append(FrameResult(i, True, verdict.label, verdict, cands, False, box,
                                       _work(full=1, masked=[b.to_dict() for b in cands], search=True, vote=True)))
            elif tracked is None:
                counters.full_inferences += 1
                out.append(FrameResult(i, False, forward(net, x).label, work=_work(full=1)))
            else:
                flow = estimate_flow(key_x, x, cfg.flow_block, cfg.flow_radius)
                counters.flow_estimates += 1
                box = warp_box(tracked, flow)
                counters.full_inferences += 1
                label = forward(net, mask_region(x, box)).label
                out.append(FrameResult(i, False, label, None, [box], True, box, _work(full=1, flow=True)))
        except Exception as e:
            raise RuntimeError(f"frame {i}: {e}") from e
    return out


def run_po(frames, net: Network, cfg: PipelineConfig, counters: Counters | None = None) -> list[FrameResult]:
    frames = _check_frames(frames)
    counters = counters if counters is not None else Counters()
    prefix, suffix = split_network(net, cfg.split_fraction)
    cut = prefix.stop
    n = len(net.layers)
    if cfg.defense == "full":
        keys = set(range(len(frames)))
    else:
        keys = set(select_key_frames(len(frames), cfg.key_rate))
    defend = _Defender(net, cfg, counters) if cfg.defense != "off" else None
    out = []
    key_x = clean = key_box = remap = None
    for i, x in enumerate(frames):
        try:
            if i in keys:
                if defend is None:
                    clean = forward_range(net, x, 0, cut)
                    counters.prefix_runs += 1
                    counters.suffix_runs += 1
                    label = int(np.argmax(forward_range(net, clean, cut, n)))
                    res = FrameResult(i, True, label, work=_work(prefix=1, suffix=1))
                else:
                    trace, cands, verdict, box = defend(x)
                    if box is not None:
                        clean = forward_range(net, mask_region(x, box), 0, cut)
                        counters.prefix_runs += 1
                    else:
                        clean = trace.outputs[cut - 1]
                    res = FrameResult(i, True, verdict.label, verdict, cands, False, box,
                                      _work(full=1, masked=[b.to_dict() for b in cands], search=True, vote=True,
                                            prefix=int(box is not None)))
                key_x, key_box, remap = x, res.masked_box, _relabel(res.verdict)
                out.append(res)
            else:
                flow = estimate_flow(key_x, x, cfg.flow_block, cfg.flow_radius)
                counters.flow_estimates += 1
                small = resize_flow(flow, clean.shape[1:])
                feats = warp_features(clean, small, cfg.feature_warp)
                counters.suffix_runs += 1
                label = _apply(int(np.argmax(forward_range(net, feats, cut, n))), remap)
                # report where the cleaned region sits now (nothing is masked here)
                box = None if key_box is None else warp_box(key_box, flow)
                out.append(FrameResult(i, False, label, None, [] if box is None else [box], True, box,
                                       _work(suffix=1, flow=True)))
        except Exception as e:
            raise RuntimeError(f"frame {i}: {e}") from e
    return out


def run(frames, net: Network, cfg: PipelineConfig, counters: Counters | None = None) -> list[FrameResult]:
    return (run_ao if cfg.mode == "ao" else run_po)(frames, net, cfg, counters)


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------

def box_overlap(pred, true) -> float:
    """Fraction of the true box covered by the predicted one."""
    t = max(pred.top, true.top)
    l = max(pred.left, true.left)
    b = min(pred.top + pred.height, true.top + true.height)
    r = min(pred.left + pred.width, true.left + true.width)
    inter = max(0, b - t) * max(0, r - l)
    return inter / (true.height * true.width)


@dataclass
class RunSummary:
    frames: int
    clean_accuracy: float | None
    attacked_accuracy: float
    recovered_accuracy: float
    detection_rate: float | None
    box_overlap: float | None
    counters: dict

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(results_per_clip, labels, plain_labels, clean_labels=None, patch_boxes=None,
              counters: Counters | None = None) -> RunSummary:
    """Aggregate per-frame results over clips.

    ``plain_labels`` are undefended predictions on the frames as given (the
    attacked accuracy when they carry a patch); ``clean_labels`` are
    predictions on the same frames without the patch.
    """
    n = hits = plain = clean = 0
    flagged = patched = 0
    overlaps = []
    for c, results in enumerate(results_per_clip):
        y = labels[c]
        for j, r in enumerate(results):
            n += 1
            hits += r.label == y
            plain += plain_labels[c][j] == y
            if clean_labels is not None:
                clean += clean_labels[c][j] == y
            tb = None if patch_boxes is None else patch_boxes[c][j]
            if tb is not None:
                patched += 1
                flagged += r.flagged
                if r.masked_box is not None:
                    overlaps.append(box_overlap(r.masked_box, tb))
    return RunSummary(n, None if clean_labels is None else clean / n, plain / n, hits / n,
                      flagged / patched if patched else None,
                      float(np.mean(overlaps)) if overlaps else None,
                      asdict(counters) if counters is not None else {})
