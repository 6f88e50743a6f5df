"""End-to-end studies on the desk-scale scenes, shared by the CLI, the demos
and the acceptance tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, Patch, TrainResult, apply_patch, footprint, random_placement, train_patch
from .lisf import cluster_stats, first_layer_features, search_candidates
from .occlude import occluding_test, vote
from .pipeline import Counters, PipelineConfig, run, summarize
from .scenario import DESK_KNOBS, TARGET_CLASS, ImageSet, Scenario, make_dataset
from .tensor_net import Network, forward

log = logging.getLogger(__name__)

ATTACK_CLASSES = (0, 1, 2)


def attack_images(seed: int = 1, n: int = 200) -> ImageSet:
    """Clean images of the non-target classes used to train and score patches."""
    return make_dataset(np.random.default_rng(seed), n, classes=ATTACK_CLASSES)


def train_default_patch(net: Network, alpha: float = 0.0, steps: int = 300, seed: int = 0,
                        side: int = 10, images: ImageSet | None = None, step_size: float = 0.02,
                        batch_size: int = 12) -> TrainResult:
    data = images if images is not None else attack_images()
    cfg = AttackConfig(target=TARGET_CLASS, images=data.images, labels=data.labels, patch_size=(side, side),
                       alpha=alpha, steps=steps, step_size=step_size, batch_size=batch_size, seed=seed,
                       rotations=(0,), regions=data.boxes)
    return train_patch(net, cfg)


def desk_pipeline(mode: str = "ao", defense: str = "amortized", **kw) -> PipelineConfig:
    knobs = dict(beta=DESK_KNOBS["beta"], theta=DESK_KNOBS["theta"], window=DESK_KNOBS["window"])
    knobs.update(kw)
    return PipelineConfig(mode=mode, defense=defense, **knobs)


@dataclass
class ImageDefense:
    clean_label: int
    attacked_label: int
    verdict_label: int
    adversarial: bool
    candidates: list
    patch_box: object
    masked_labels: tuple = ()


def defend_patched_images(net: Network, patch: Patch, data: ImageSet, seed: int = 5, n: int | None = None,
                          knobs: dict | None = None) -> list[ImageDefense]:
    """Paste the patch at a random spot on each object and run search, occlusion and vote."""
    knobs = {**DESK_KNOBS, **(knobs or {})}
    rng = np.random.default_rng(seed)
    out = []
    idx = range(len(data.labels)) if n is None else range(min(n, len(data.labels)))
    for i in idx:
        x = data.images[i]
        pl = random_placement(rng, patch, x.shape, (0,), within=data.boxes[i])
        xp = apply_patch(patch, x, pl)
        trace = forward(net, xp)
        cands = search_candidates(net, trace, knobs["window"], knobs["beta"], knobs["theta"])
        labels = occluding_test(net, xp, cands, True, trace)
        verdict = vote(labels)
        out.append(ImageDefense(int(data.labels[i]), trace.label, verdict.label, verdict.adversarial, cands,
                                footprint(patch, pl), labels.masked))
    return out


def adaptive_curve(net: Network, alphas=(0.0, 0.01), steps: int = 300, seed: int = 0,
                   eval_images: ImageSet | None = None) -> list[dict]:
    """Attack success and defense detection rate for patches trained at each alpha."""
    rows = []
    train = attack_images()
    held = eval_images if eval_images is not None else attack_images(seed=11, n=100)
    for a in alphas:
        res = train_default_patch(net, alpha=a, steps=steps, seed=seed, images=train)
        hits = [d for d in defend_patched_images(net, res.patch, held) if d.attacked_label == TARGET_CLASS]
        detected = sum(d.adversarial for d in hits) / len(hits) if hits else None
        rows.append({"alpha": a, "success": res.success_rate, "detection": detected, "patch": res.patch})
        log.info("alpha %.4g: success %.3f detection %s", a, res.success_rate, detected)
    return rows


def characterize(net: Network, patch: Patch, n: int = 200, seed: int = 21, top_k: int | None = None,
                 bandwidth: float | None = None) -> dict:
    """Top-k cluster statistics of the first-layer heat map, benign vs patched."""
    top_k = top_k or DESK_KNOBS["top_k"]
    bandwidth = bandwidth or DESK_KNOBS["bandwidth"]
    data = make_dataset(np.random.default_rng(seed), n, classes=ATTACK_CLASSES)
    rng = np.random.default_rng(seed + 1)
    benign, patched = [], []
    for x, box in zip(data.images, data.boxes):
        pl = random_placement(rng, patch, x.shape, (0,), within=box)
        xp = apply_patch(patch, x, pl)
        benign.append(cluster_stats(first_layer_features(net, x), top_k, bandwidth))
        patched.append(cluster_stats(first_layer_features(net, xp), top_k, bandwidth))
    return {"benign": benign, "patched": patched, "top_k": top_k, "bandwidth": bandwidth}


def cluster_summary(stats: list) -> dict:
    counts = np.array([s.n_clusters for s in stats])
    dev = np.array([s.distance_std for s in stats])
    return {"n": int(len(stats)), "single_cluster_fraction": float(np.mean(counts == 1)),
            "median_clusters": float(np.median(counts)),
            "cluster_histogram": np.bincount(counts).tolist(),
            "median_distance_std": float(np.median(dev))}


def run_scenario(net: Network, sc: Scenario, cfg: PipelineConfig):
    """Run every clip; returns (per-clip results, summary, flat work schedule)."""
    counters = Counters()
    results, plain, clean, schedule = [], [], [], []
    for clip in sc.clips:
        r = run(clip.frames, net, cfg, counters)
        results.append(r)
        schedule += [f.work for f in r]
        plain.append([forward(net, x).label for x in clip.frames])
        if clip.clean_frames is None:
            clean.append(plain[-1])
        else:
            clean.append([forward(net, x).label for x in clip.clean_frames])
    patched = any(b is not None for clip in sc.clips for b in clip.patch_boxes)
    summary = summarize(results, [c.label for c in sc.clips], plain, clean,
                        [c.patch_boxes for c in sc.clips] if patched else None, counters)
    return results, summary, schedule
