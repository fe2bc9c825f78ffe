"""Tables and figures rebuilt from persisted run directories."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ABLATION_ROWS, FLAG_NAMES, AblationFlags
from .evaluation import AccuracyMatrix, average_accuracy
from .references import ABLATION_TABLE, DIGITS_TABLE, REPRODUCED_ROWS, direction_key

log = logging.getLogger(__name__)

BASELINE_METHODS = {"naive": "Source Only", "dann": "DANN", "joint": "Joint Training"}


class MalformedRun(ValueError):
    pass


@dataclass
class RunRecord:
    path: Path
    name: str
    flags: AblationFlags
    direction: str | None
    matrices: list[AccuracyMatrix]
    losses: list[list[dict]] = field(default_factory=list)
    entropies: list[float] = field(default_factory=list)   # natural log, per seed

    @property
    def method(self) -> str:
        for suffix, label in BASELINE_METHODS.items():
            if self.name.endswith(f"-{suffix}"):
                return label
        for label, flags in ABLATION_ROWS.items():
            if flags == self.flags:
                return label
        return self.name

    def finals(self) -> list[float]:
        return [100 * average_accuracy(m) for m in self.matrices]

    def curve(self) -> list[float]:
        K = min(len(m) for m in self.matrices)
        return [100 * float(np.mean([average_accuracy(m, k) for m in self.matrices]))
                for k in range(1, K + 1)]

    def first_task_retention(self) -> list[float]:
        K = min(len(m) for m in self.matrices)
        return [100 * float(np.mean([m.row(k)[0] for m in self.matrices])) for k in range(1, K + 1)]


def load_run(path: str | os.PathLike) -> RunRecord:
    path = Path(path)
    cfg_path = path / "config.json"
    if not cfg_path.is_file():
        raise MalformedRun(f"{path}: no config.json")
    try:
        record = json.loads(cfg_path.read_text())
        cfg = record["config"]
        flags = AblationFlags.parse(record["flags"])
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise MalformedRun(f"{path}: unreadable config.json ({e})") from e
    files = sorted(path.glob("accmatrix_seed*.json"), key=lambda p: int(p.stem.split("seed")[1]))
    if not files:
        raise MalformedRun(f"{path}: no accmatrix_seed*.json files")
    try:
        matrices = [AccuracyMatrix.load(f) for f in files]
        for m in matrices:
            m.row(len(m))
    except (json.JSONDecodeError, ValueError, IndexError) as e:
        raise MalformedRun(f"{path}: bad accuracy matrix ({e})") from e
    losses = []
    for f in sorted(path.glob("losses_seed*.csv")):
        with open(f, newline="") as fh:
            losses.append(list(csv.DictReader(fh)))
    entropies = []
    if (path / "metrics.csv").is_file():
        with open(path / "metrics.csv", newline="") as fh:
            entropies = [float(r["entropy"]) for r in csv.DictReader(fh) if r.get("entropy")]
    data = cfg.get("data", {})
    direction = direction_key(data.get("source", ""), data.get("target", ""))
    return RunRecord(path, cfg.get("name", path.name), flags, direction, matrices, losses, entropies)


def expand_run_dirs(paths) -> list[Path]:
    """A directory without config.json but with run subdirectories (an ablation suite) expands."""
    out = []
    for p in map(Path, paths):
        if not (p / "config.json").exists() and p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / "config.json").exists())
            if subs:
                order = {label.lower().replace(" ", "_"): i for i, label in enumerate(ABLATION_ROWS)}
                out += sorted(subs, key=lambda d: order.get(d.name, len(order)))
                continue
        out.append(p)
    return out


def _fmt(mean, std):
    if mean is None:
        return "n/a"
    return f"{mean:.2f}" if std is None else f"{mean:.2f} ± {std:.2f}"


def _reference(run: RunRecord):
    if run.direction is None:
        return None
    method = run.method
    if method in ABLATION_TABLE and method not in BASELINE_METHODS.values():
        return ABLATION_TABLE[method][run.direction]
    if method in DIGITS_TABLE:
        return DIGITS_TABLE[method][run.direction]
    return None


def comparison_rows(runs: list[RunRecord], with_reference: bool = True,
                    log_base: float | None = None) -> list[dict]:
    rows = []
    for r in runs:
        finals = r.finals()
        std = float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0
        row = {"method": r.method, "run": r.path.name,
               **{n: "yes" if getattr(r.flags, n) else "no" for n in FLAG_NAMES},
               "mean": float(np.mean(finals)), "std": std, "seeds": len(finals),
               "entropy": _entropy(r.entropies, log_base)}
        if with_reference:
            ref = _reference(r)
            row["reported_mean"] = ref[0] if ref else None
            row["reported_std"] = ref[1] if ref else None
        rows.append(row)
    return rows


def _entropy(values: list[float], log_base: float | None):
    if not values:
        return None
    mean = float(np.mean(values))
    return mean / math.log(log_base) if log_base else mean


def _markdown_table(rows: list[dict], with_reference: bool) -> str:
    head = ["Method", "PA", "PL", "Meta", "R1", "R2", "Ours", "Seeds", "Entropy"]
    if with_reference:
        head.append("Reported")
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r["method"]] + [r[n] for n in FLAG_NAMES] + [_fmt(r["mean"], r["std"]), str(r["seeds"]),
                                                     _fmt(r["entropy"], None)]
        if with_reference:
            cells.append(_fmt(r["reported_mean"], r["reported_std"]))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def _reference_only_section(direction: str) -> str:
    lines = [f"Paper-reported, not reproduced ({direction}):", "",
             "| Method | Reported |", "|---|---|"]
    for name, cols in DIGITS_TABLE.items():
        if name not in REPRODUCED_ROWS:
            lines.append(f"| {name} | {_fmt(*cols[direction])} |")
    return "\n".join(lines)


def _figures(runs: list[RunRecord], out: Path, formats=("png", "svg")) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []

    def save(fig, stem):
        for ext in formats:
            p = out / f"{stem}.{ext}"
            fig.savefig(p, bbox_inches="tight")
            written.append(p)
        plt.close(fig)

    for stem, getter, ylabel in (("accuracy_vs_task", RunRecord.curve, "average accuracy (%)"),
                                 ("first_task_retention", RunRecord.first_task_retention,
                                  "task 1 accuracy (%)")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for r in runs:
            ys = getter(r)
            ax.plot(range(1, len(ys) + 1), ys, marker="o", label=r.method)
        ax.set_xlabel("tasks learned")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 100)
        ax.legend(fontsize=7)
        save(fig, stem)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in runs:
        if not r.losses:
            continue
        steps = [int(row["step"]) for row in r.losses[0]]
        totals = [float(row["total"]) for row in r.losses[0]]
        ax.plot(steps, totals, lw=0.7, label=r.method)
    ax.set_xlabel("optimizer step (seed 0)")
    ax.set_ylabel("logged loss")
    ax.legend(fontsize=7)
    save(fig, "loss_trajectories")
    return written


def render_report(run_dirs, out_dir: str | os.PathLike | None = None,
                  formats=("png", "svg"), log_base: float | None = None) -> dict:
    """Write report.md, report.csv and figures; returns what was written.

    Comparison columns appear only when more than one run is given.
    """
    runs = []
    for p in expand_run_dirs(run_dirs):
        try:
            runs.append(load_run(p))
        except MalformedRun as e:
            log.warning("skipping run: %s", e)
    if not runs:
        raise MalformedRun("no readable run directories")
    out = Path(out_dir) if out_dir is not None else runs[0].path.parent / "report"
    out.mkdir(parents=True, exist_ok=True)

    compare = len(runs) > 1
    rows = comparison_rows(runs, with_reference=compare, log_base=log_base)
    curves = {r.path.name: r.curve() for r in runs}
    figures = _figures(runs, out, formats)
    md = ["# Results", ""]
    if compare:
        md += [_markdown_table(rows, True), ""]
        directions = sorted({r.direction for r in runs if r.direction})
        for d in directions:
            md += [_reference_only_section(d), ""]
    md += ["## Average accuracy after each task (%)", ""]
    for r in runs:
        md.append(f"- {r.method} ({r.path.name}): " + ", ".join(f"{v:.2f}" for v in curves[r.path.name]))
    md += ["", "Figures: " + ", ".join(sorted({p.name for p in figures}))]
    (out / "report.md").write_text("\n".join(md) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return {"out_dir": out, "rows": rows, "curves": curves, "figures": figures}
