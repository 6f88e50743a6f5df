"""Occluding test and monopolist voting.

Every candidate box is zeroed in turn and the masked image re-classified.
An input is called adversarial when exactly one masked prediction stands
apart while the remaining masked predictions agree: that candidate is the
"monopolist" dominating the original prediction and its masked label is the
recovered one.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .region import recompute_masked
from .tensor_net import ActivationTrace, Network, forward

log = logging.getLogger(__name__)


def _bounds(box, shape) -> tuple[int, int, int, int]:
    _, h, w = shape
    top, left, height, width = int(box.top), int(box.left), int(box.height), int(box.width)
    if height < 1 or width < 1:
        raise ValueError(f"box {box} is empty")
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValueError(f"box {box} outside {h}x{w} image")
    return top, left, height, width


def mask_region(x: np.ndarray, box) -> np.ndarray:
    """Copy of ``x`` with ``box`` set to zero in every channel."""
    top, left, height, width = _bounds(box, x.shape)
    out = x.copy()
    out[:, top:top + height, left:left + width] = 0
    return out


@dataclass(frozen=True)
class LabelSet:
    original: int  # L0
    masked: tuple = ()  # L1..Lk, aligned with the candidates

    @property
    def k(self) -> int:
        return len(self.masked)

    def validate(self, class_count: int) -> None:
        for label in (self.original, *self.masked):
            if not 0 <= label < class_count:
                raise ValueError(f"label {label} outside {class_count} classes")


@dataclass(frozen=True)
class Verdict:
    adversarial: bool
    label: int  # final (recovered or benign) label
    candidate: int | None = None  # 1-based index of the monopolist candidate
    labels: LabelSet = field(default_factory=lambda: LabelSet(0))

    @property
    def kind(self) -> str:
        return "adversarial" if self.adversarial else "benign"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "candidate": self.candidate,
                "recovered_label": self.label if self.adversarial else None,
                "label": self.label,
                "labels": [self.labels.original, *self.labels.masked]}

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        labels = LabelSet(d["labels"][0], tuple(d["labels"][1:]))
        return cls(d["kind"] == "adversarial", d["label"], d["candidate"], labels)


def occluding_test(net: Network, x: np.ndarray, candidates, fast: bool = True,
                   trace: ActivationTrace | None = None) -> LabelSet:
    """L0 for ``x`` and Li for ``x`` with candidate i zeroed.

    ``fast`` recomputes only the regions a mask affects, reusing the benign
    activations of ``trace`` (computed here when not given).
    """
    if trace is None:
        trace = forward(net, x)
    masked = []
    for box in candidates:
        _bounds(box, x.shape)
        if fast:
            logits = recompute_masked(net, trace, x, box)
        else:
            logits = forward(net, mask_region(x, box)).logits
        masked.append(int(np.argmax(logits)))
    return LabelSet(trace.label, tuple(masked))


def find_orphan(masked, original: int | None = None) -> int | None:
    """0-based index of the single masked label that differs from all the others,
    which in turn all agree; None when there is no such label.

    Two distinct masked labels are each other's orphan.  That tie is settled
    by ``original``: the orphan is the one whose partner matches it.
    """
    k = len(masked)
    if k < 2:
        return None
    counts = Counter(masked)
    found = []
    for i, label in enumerate(masked):
        rest = set(masked[:i] + masked[i + 1:])
        if counts[label] == 1 and len(rest) == 1:
            found.append(i)
    if len(found) == 1:
        return found[0]
    if len(found) == 2 and original is not None:
        hits = [i for i in found if masked[1 - i] == original]
        if len(hits) == 1:
            return hits[0]
    return None


def vote(labels: LabelSet) -> Verdict:
    masked = tuple(labels.masked)
    k = len(masked)
    if k == 0:
        return Verdict(False, labels.original, None, labels)
    if k == 1:
        if masked[0] != labels.original:
            return Verdict(True, masked[0], 1, labels)
        return Verdict(False, labels.original, None, labels)
    i = find_orphan(masked, labels.original)
    if i is not None:
        return Verdict(True, masked[i], i + 1, labels)
    counts = Counter((labels.original, *masked))
    best = max(counts.values())
    if len(set(masked)) > 1:
        log.debug("no monopolist among masked labels %s; majority vote", masked)
    if counts[labels.original] == best:
        return Verdict(False, labels.original, None, labels)
    return Verdict(False, min(lab for lab, c in counts.items() if c == best), None, labels)


def defend_image(net: Network, x: np.ndarray, candidates, fast: bool = True,
                 trace: ActivationTrace | None = None) -> Verdict:
    return vote(occluding_test(net, x, candidates, fast, trace))
