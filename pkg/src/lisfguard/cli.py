"""Command-line entry points (``python -m lisfguard <command>``).

Exit codes: 0 success, 1 internal invariant violated, 2 bad usage or input.
Config and output formats are documented in ``docs/cli_schema.md``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import costmodel as cm
from .io import load_network, load_tensor, save_tensor, write_json, write_jsonl
from .pipeline import PipelineConfig, select_key_frames, split_network
from .region import trace_regions
from .scenario import (DESK_KNOBS, TARGET_CLASS, ConfigError, ScenarioConfig, build_scenario, load_scenario,
                       save_scenario)
from .attack import Patch

log = logging.getLogger("lisfguard")


class InvariantError(RuntimeError):
    pass


ATTACK_DEFAULTS = {"model": "default", "target": TARGET_CLASS, "patch_side": 10, "steps": 300,
                   "step_size": 0.02, "batch_size": 12, "alpha": 0.0, "images": 200, "image_seed": 1}
RUN_DEFAULTS = {"scenario": None, "model": "default",
                "pipeline": {"beta": DESK_KNOBS["beta"], "theta": DESK_KNOBS["theta"],
                             "window": DESK_KNOBS["window"]}}
STATS_DEFAULTS = {"model": "default", "patch": None, "images": 200, "top_k": DESK_KNOBS["top_k"],
                  "bandwidth": DESK_KNOBS["bandwidth"]}
COST_DEFAULTS = {"net": "deep16", "box_fraction": 0.02, "candidates": 3, "hw": {}}


def _read_config(path, defaults: dict) -> tuple[dict, Path]:
    cfg = json.loads(json.dumps(defaults))
    if path is None:
        return cfg, Path.cwd()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, val in user.items():
        if isinstance(defaults[key], dict) and isinstance(val, dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg, path.parent


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _model(spec, base: Path):
    from .victim import default_victim

    if spec in (None, "default"):
        return default_victim()
    path = _resolve(base, spec)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} not found")
    return load_network(path)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen_scenario(args) -> None:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        cfg, base = ScenarioConfig.load(path), path.parent
    else:
        cfg, base = ScenarioConfig(), Path.cwd()
    if cfg.patch_file and not _resolve(base, cfg.patch_file).exists():
        raise FileNotFoundError(f"patch file {cfg.patch_file} not found")
    sc = build_scenario(cfg, args.seed, base_dir=base)
    save_scenario(sc, _out(args))
    log.info("wrote %d clips to %s", len(sc.clips), args.out)


def cmd_attack_train(args) -> None:
    from .attack import AttackConfig, train_patch
    from .experiments import ATTACK_CLASSES
    from .scenario import make_dataset

    cfg, base = _read_config(args.config, ATTACK_DEFAULTS)
    net = _model(cfg["model"], base)
    data = make_dataset(np.random.default_rng(cfg["image_seed"]), cfg["images"],
                        classes=[c for c in ATTACK_CLASSES if c != cfg["target"]] or ATTACK_CLASSES)
    side = cfg["patch_side"]
    res = train_patch(net, AttackConfig(target=cfg["target"], images=data.images, labels=data.labels,
                                        patch_size=(side, side), alpha=cfg["alpha"], steps=cfg["steps"],
                                        step_size=cfg["step_size"], batch_size=cfg["batch_size"], seed=args.seed,
                                        rotations=(0,), regions=data.boxes))
    out = _out(args)
    save_tensor(out / "patch.tensor", res.patch.pixels)
    write_json(out / "attack.json", {"config": cfg, "seed": args.seed, **res.to_json()})
    log.info("attack success %.3f (base %.3f)", res.success_rate, res.base_rate)


def _check_schedule(results_per_clip, pcfg: PipelineConfig) -> None:
    for results in results_per_clip:
        if pcfg.defense == "amortized":
            keys = set(select_key_frames(len(results), pcfg.key_rate))
            for r in results:
                if r.is_key != (r.index in keys):
                    raise InvariantError(f"frame {r.index}: key-frame schedule violated")
                if not r.is_key and r.work.get("search"):
                    raise InvariantError(f"frame {r.index}: non-key frame ran a search")
                if r.is_key and r.warped:
                    raise InvariantError(f"frame {r.index}: key frame used warped candidates")


def cmd_defend_run(args) -> None:
    from .experiments import run_scenario
    from .pipeline import run

    cfg, base = _read_config(args.config, RUN_DEFAULTS)
    if not cfg["scenario"]:
        raise ConfigError("defend-run needs a 'scenario' directory in its config")
    sc_dir = _resolve(base, cfg["scenario"])
    if not (sc_dir / "ground_truth.json").exists():
        raise FileNotFoundError(f"no scenario at {sc_dir}")
    net = _model(cfg["model"], base)
    pc = dict(cfg["pipeline"])
    if args.mode:
        pc["mode"] = args.mode
    if args.defense:
        pc["defense"] = args.defense
    try:
        pcfg = PipelineConfig(**pc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad pipeline settings: {e}") from e
    sc = load_scenario(sc_dir)
    results, summary, schedule = run_scenario(net, sc, pcfg)
    _check_schedule(results, pcfg)
    split = split_network(net, pcfg.split_fraction)[0].stop if pcfg.mode == "po" else None
    cost = cm.pipeline_cost(schedule, net, cm.HwConfig(), pcfg.flow_radius, split)
    base_cfg = PipelineConfig(**{**pc, "defense": "off"})
    base_sched = [f.work for clip in sc.clips for f in run(clip.frames, net, base_cfg)]
    base_cost = cm.pipeline_cost(base_sched, net, cm.HwConfig(), pcfg.flow_radius, split)
    out = _out(args)
    rows = []
    for c, res in enumerate(results):
        for r in res:
            rows.append({"clip": c, **r.to_dict()})
    write_jsonl(out / "frames.jsonl", rows)
    summary_d = summary.to_dict()
    summary_d.update(config=pcfg.to_dict(), seed=args.seed,
                     modeled_cost={"defended": cost.to_dict(), "undefended": base_cost.to_dict(),
                                   "overhead": cost.cycles / base_cost.cycles - 1})
    write_json(out / "summary.json", summary_d)
    log.info("recovered %.3f attacked %.3f clean %s", summary.recovered_accuracy, summary.attacked_accuracy,
             summary.clean_accuracy)


def cmd_stats(args) -> None:
    from .experiments import characterize, cluster_summary

    cfg, base = _read_config(args.config, STATS_DEFAULTS)
    if not cfg["patch"]:
        raise ConfigError("stats needs a 'patch' tensor file in its config")
    ppath = _resolve(base, cfg["patch"])
    if not ppath.exists():
        raise FileNotFoundError(f"patch file {ppath} not found")
    net = _model(cfg["model"], base)
    res = characterize(net, Patch(load_tensor(ppath)), cfg["images"], args.seed, cfg["top_k"], cfg["bandwidth"])
    out = _out(args)
    write_json(out / "stats.json", {"config": cfg, "seed": args.seed,
                                    "benign": cluster_summary(res["benign"]),
                                    "patched": cluster_summary(res["patched"])})
    with open(out / "clusters.csv", "w") as fh:
        fh.write("set,image,n_clusters,distance_std\n")
        for name in ("benign", "patched"):
            for i, s in enumerate(res[name]):
                fh.write(f"{name},{i},{s.n_clusters},{s.distance_std:.6f}\n")


def _cost_net(spec, base: Path):
    if spec == "deep16":
        return cm.deep_reference()
    if spec == "shallow4":
        return cm.shallow_reference()
    return _model(spec, base)


def cmd_cost_report(args) -> None:
    cfg, base = _read_config(args.config, COST_DEFAULTS)
    try:
        hw = cm.HwConfig.from_dict(cfg["hw"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad hw settings: {e}") from e
    net = _cost_net(cfg["net"], base)
    k = int(cfg["candidates"])
    box = cm.centered_box(net.input_shape[1], cfg["box_fraction"])
    trace = trace_regions(net, box)
    full = cm.inference_cost(net, hw, name=f"{net.name}-full")
    masked = cm.inference_cost(net, hw, trace, name=f"{net.name}-masked")
    if masked.cycles > full.cycles:
        raise InvariantError("masked recomputation modeled slower than full inference")
    search, votes = cm.search_cycles(net, hw), cm.vote_cycles(k)
    multi = full.cycles + k * masked.cycles
    out = _out(args)
    report = {"config": cfg, "net": net.name, "box": box.to_dict(),
              "full": full.to_dict(), "masked": masked.to_dict(),
              "latency_reduction": 1 - masked.cycles / full.cycles,
              "search_cycles": search, "vote_cycles": votes,
              "search_vote_overhead": (search + votes) / multi,
              "mnb": cm.mnb_feasibility(trace, hw).to_dict()}
    write_json(out / "cost.json", report)
    (out / "full_layers.csv").write_text(full.to_csv())
    (out / "masked_layers.csv").write_text(masked.to_csv())


COMMANDS = {"gen-scenario": cmd_gen_scenario, "attack-train": cmd_attack_train, "defend-run": cmd_defend_run,
            "stats": cmd_stats, "cost-report": cmd_cost_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lisfguard", description="Adversarial patch defense toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        if name == "defend-run":
            p.add_argument("--mode", choices=("ao", "po"))
            p.add_argument("--defense", choices=("off", "full", "amortized"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (InvariantError, AssertionError) as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
