"""Multi-run sweeps and the comparison report built from their metrics files."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import load_split, read_spec
from .detector import ArchConfig
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

EVAL_REQUIRED = ("t", "mode", "types", "alpha", "seed", "map")
STEP_REQUIRED = ("t", "l_sup", "l_total")


class ReportError(ValueError):
    """A metrics file does not have the expected columns."""


def run_name(config: TrainConfig) -> str:
    return f"{config.mode}_{config.types}_a{config.alpha:g}_s{config.seed}".replace("+", "-")


def load_benchmark(data_root):
    """``(labeled, unlabeled, eval_set, class_names)`` as expected by :func:`isdlab.trainer.train`."""
    names = read_spec(data_root).classes
    _, li, la = load_split(data_root, "labeled", names)
    _, ui, _ = load_split(data_root, "unlabeled", names)
    _, ei, ea = load_split(data_root, "eval", names)
    return (li, la), ui, (ei, ea), list(names)


def run_sweep(data_root, out_root, base: TrainConfig, overrides: Iterable[dict],
              arch: ArchConfig | None = None, skip_existing: bool = False) -> list[Path]:
    """Train one run per override dict under ``out_root/<run name>``.

    With ``skip_existing`` a run whose final evaluation row is already on
    disk is left alone.
    """
    labeled, unlabeled, eval_set, names = load_benchmark(data_root)
    if arch is None:
        arch = ArchConfig(image_size=labeled[0].shape[1], num_classes=len(names))
    out_root = Path(out_root)
    dirs = []
    for ov in overrides:
        cfg = replace(base, **ov)
        run_dir = out_root / run_name(cfg)
        dirs.append(run_dir)
        if skip_existing and _finished(run_dir, cfg.max_iterations):
            log.info("skipping finished run %s", run_dir.name)
            continue
        log.info("training %s", run_dir.name)
        train(cfg, labeled, unlabeled, eval_set, run_dir, arch=arch, class_names=names)
    return dirs


def _finished(run_dir: Path, max_iterations: int) -> bool:
    path = run_dir / "eval_metrics.csv"
    if not path.exists():
        return False
    rows = read_csv(path, EVAL_REQUIRED)
    return bool(rows) and int(rows[-1]["t"]) == max_iterations


def read_csv(path, required: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ReportError(f"{path}: missing columns {missing}")
        return list(reader)


def _eval_path(p: Path) -> Path:
    return p / "eval_metrics.csv" if p.is_dir() else p


@dataclass
class RunResult:
    path: Path
    mode: str
    types: str
    alpha: float
    seed: int
    final_map: float
    curve: list[tuple[int, float]]

    @property
    def group(self) -> tuple[str, str, float]:
        return self.mode, self.types, self.alpha


def load_results(paths: Iterable) -> list[RunResult]:
    """Read the final mAP of each run from run directories or ``eval_metrics.csv`` files."""
    out = []
    for p in map(Path, paths):
        rows = read_csv(_eval_path(p), EVAL_REQUIRED)
        if not rows:
            raise ReportError(f"{p}: no evaluation rows")
        last = rows[-1]
        out.append(RunResult(p, last["mode"], last["types"], float(last["alpha"]), int(last["seed"]),
                             float(last["map"]), [(int(r["t"]), float(r["map"])) for r in rows]))
    return out


@dataclass
class GroupSummary:
    mode: str
    types: str
    alpha: float
    n: int
    mean: float
    std: float
    delta: float | None     # mean minus the supervised mean, when a supervised group exists


def summarize(results: Sequence[RunResult]) -> list[GroupSummary]:
    """Mean and (population) standard deviation of final mAP per (mode, types, alpha)."""
    groups: dict[tuple, list[float]] = {}
    for r in results:
        groups.setdefault(r.group, []).append(r.final_map)
    sup = [v for (mode, _, _), vals in groups.items() if mode == "supervised" for v in vals]
    base = float(np.mean(sup)) if sup else None
    out = []
    for (mode, types, alpha), vals in groups.items():
        mean = float(np.mean(vals))
        out.append(GroupSummary(mode, types, alpha, len(vals), mean, float(np.std(vals)),
                                None if base is None else mean - base))
    order = {"supervised": 0, "csd": 1, "isd": 2, "csd+isd": 3}
    return sorted(out, key=lambda g: (order.get(g.mode, 9), g.types, g.alpha))


def markdown_table(summary: Sequence[GroupSummary]) -> str:
    lines = ["| mode | types | alpha | runs | mAP (%) | delta vs supervised |",
             "|---|---|---|---|---|---|"]
    for g in summary:
        types = "-" if g.mode in ("supervised", "csd") else g.types
        alpha = "-" if g.mode in ("supervised", "csd") else f"{g.alpha:g}"
        delta = "n/a" if g.delta is None else f"{100 * g.delta:+.2f}"
        lines.append(f"| {g.mode} | {types} | {alpha} | {g.n} | {100 * g.mean:.2f} ± {100 * g.std:.2f} | {delta} |")
    return "\n".join(lines) + "\n"


def plot_curves(paths: Iterable, out_dir) -> list[Path]:
    """Write ``map_curves.png`` and, when step logs exist, ``loss_curves.png``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [Path(p) for p in paths]
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for r in load_results(paths):
        t, m = zip(*r.curve)
        ax.plot(t, [100 * v for v in m], marker="o", ms=3, label=r.path.stem if r.path.is_file() else r.path.name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mAP (%)")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_dir / "map_curves.png", dpi=120)
    plt.close(fig)
    written.append(out_dir / "map_curves.png")

    step_files = [(p.name, p / "train_metrics.csv") for p in paths if (p / "train_metrics.csv").exists()]
    if step_files:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        for name, f in step_files:
            rows = read_csv(f, STEP_REQUIRED)
            t = np.array([int(r["t"]) for r in rows])
            for ax, key in zip(axes, ("l_sup", "l_total")):
                y = _smooth(np.array([float(r[key]) for r in rows]))
                ax.plot(t[len(t) - len(y):], y, label=name, lw=1)
        for ax, key in zip(axes, ("supervised loss", "total loss")):
            ax.set_xlabel("iteration")
            ax.set_title(key)
            ax.set_yscale("log")
        axes[0].legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curves.png", dpi=120)
        plt.close(fig)
        written.append(out_dir / "loss_curves.png")
    return written


def _smooth(x: np.ndarray, k: int = 25) -> np.ndarray:
    if len(x) < k:
        return x
    return np.convolve(x, np.ones(k) / k, mode="valid")


def write_report(paths: Iterable, out_dir) -> str:
    """Markdown table plus figures into ``out_dir``; returns the table."""
    paths = list(paths)
    table = markdown_table(summarize(load_results(paths)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(table)
    plot_curves(paths, out_dir)
    return table

