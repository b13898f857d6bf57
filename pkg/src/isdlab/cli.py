"""``isdlab`` command line: generate, train, eval, sweep, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SyntheticSpec, VocParseError, load_split, read_spec, write_dataset
from .detector import ArchConfig, CheckpointError, ConfigError, load_checkpoint
from .experiments import ReportError, load_benchmark, run_name, run_sweep, write_report
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("isdlab")

SPLIT_KEYS = ("n_labeled", "n_unlabeled", "n_eval")


def load_config(path) -> dict:
    """TOML file with optional ``[data]``, ``[train]`` and ``[arch]`` tables."""
    if path is None:
        return {}
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    unknown = set(cfg) - {"data", "train", "arch"}
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    return cfg


def _build(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(bad)}")
    return cls(**values)


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def cmd_generate(args) -> int:
    data = dict(load_config(args.config).get("data", {}))
    counts = {k: data.pop(k, d) for k, d in zip(SPLIT_KEYS, (200, 2000, 500))}
    counts.update(_overrides(args, SPLIT_KEYS))
    data.update(_overrides(args, ["seed"]))
    spec = _build(SyntheticSpec, data, "data")
    manifest = write_dataset(args.out, spec, force=args.force, **counts)
    print(f"wrote {len(manifest.labeled)}/{len(manifest.unlabeled)}/{len(manifest.eval)} "
          f"labeled/unlabeled/eval images to {args.out}")
    return 0


def _train_config(args, cfg: dict) -> TrainConfig:
    train_cfg = _build(TrainConfig, dict(cfg.get("train", {})), "train")
    return replace(train_cfg, **_overrides(args, ["mode", "types", "alpha", "gamma1", "gamma2", "seed",
                                                   "max_iterations"]))


def _arch(cfg: dict, image_size: int, num_classes: int) -> ArchConfig:
    values = {"image_size": image_size, "num_classes": num_classes, **cfg.get("arch", {})}
    return _build(ArchConfig, values, "arch")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    config = _train_config(args, cfg)
    labeled, unlabeled, eval_set, names = load_benchmark(args.data)
    arch = _arch(cfg, labeled[0].shape[1], len(names))
    out = Path(args.out) / run_name(config) if args.out_is_root else Path(args.out)
    state, _, evals = train(config, labeled, unlabeled, eval_set, out, arch=arch, class_names=names)
    final = evals[-1]["map"] if evals else float("nan")
    print(f"{run_name(config)}: {state.t} iterations, final mAP {100 * final:.2f}% -> {out}")
    return 0


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    names = list(read_spec(args.data).classes)
    ids, images, anns = load_split(args.data, args.split, names)
    res = evaluate(model, images, anns, args.iou, image_ids=ids)
    report = {
        "checkpoint": str(args.checkpoint),
        "iteration": extra.get("t"),
        "data": str(args.data),
        "split": args.split,
        "iou_threshold": args.iou,
        "num_images": len(ids),
        "ap": {names[c - 1]: v for c, v in res["ap"].items()},
        "map": res["map"],
    }
    for name, v in report["ap"].items():
        print(f"{name:>12s}  AP {100 * v:6.2f}")
    print(f"{'mAP':>12s}     {100 * res['map']:6.2f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".{args.split}.json")
    out.write_text(json.dumps(report, indent=1))
    print(f"report written to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    base = _train_config(args, cfg)
    spec = read_spec(args.data)
    arch = _arch(cfg, spec.image_size, spec.num_classes)
    runs = [{"mode": m, "alpha": a, "seed": s} for s in args.seeds for m in args.modes for a in args.alphas
            if not (m in ("supervised", "csd") and a != args.alphas[0])]
    dirs = run_sweep(args.data, args.out, base, runs, arch=arch, skip_existing=args.resume)
    print(write_report(dirs, args.out))
    return 0


def cmd_report(args) -> int:
    print(write_report(args.runs, args.out))
    print(f"figures and report.md written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isdlab", description="Interpolation-consistency SSL detection lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-labeled", type=int)
    g.add_argument("--n-unlabeled", type=int)
    g.add_argument("--n-eval", type=int)
    g.set_defaults(func=cmd_generate)

    def train_flags(q):
        q.add_argument("--config")
        q.add_argument("--data", required=True)
        q.add_argument("--types", choices=["type1", "type2", "both"])
        q.add_argument("--gamma1", type=float)
        q.add_argument("--gamma2", type=float)
        q.add_argument("--max-iterations", type=int)

    t = sub.add_parser("train", help="train one model")
    train_flags(t)
    t.add_argument("--mode", choices=["supervised", "csd", "isd", "csd+isd"])
    t.add_argument("--alpha", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--out-is-root", action="store_true", help="create a run-named subdirectory under --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval", choices=["labeled", "unlabeled", "eval"])
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train a grid of modes x alphas x seeds and report")
    train_flags(s)
    s.add_argument("--modes", nargs="+", default=["supervised", "csd", "isd", "csd+isd"],
                   choices=["supervised", "csd", "isd", "csd+isd"])
    s.add_argument("--alphas", nargs="+", type=float, default=[100.0])
    s.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    s.add_argument("--out", required=True)
    s.add_argument("--resume", action="store_true", help="skip runs that already finished")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="comparison table and curves from finished runs")
    r.add_argument("runs", nargs="+", help="run directories or eval_metrics.csv files")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, VocParseError, ReportError, FileExistsError, FileNotFoundError) as exc:
        print(f"isdlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
