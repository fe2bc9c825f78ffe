"""Digit-benchmark experiment protocols and their pass/fail checks.

Each protocol is a list of runs (config, flags, repeats) written under one
results root. ``run_protocol`` executes missing runs; ``check`` reads the run
directories back and returns a verdict without training anything.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ABLATION_ROWS, AblationFlags, ExperimentConfig
from .data import DatasetUnavailable, default_data_dir, load_usps
from .evaluation import AccuracyMatrix, average_accuracy

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"
DIRECTIONS = {"mn_us": "digits_mn_us.json", "us_mn": "digits_us_mn.json"}
MEMORY_SIZES = (5, 50, 100)
INNER_STEPS = (1, 2)
THRESHOLDS = (0.7, 0.75, 0.8, 0.85, 0.9)
SWEEP_SEEDS = 3


@dataclass(frozen=True)
class PlannedRun:
    slug: str
    direction: str
    flags: AblationFlags
    repeats: int
    overrides: tuple[tuple[str, object], ...] = ()

    def config(self, config_dir: Path = CONFIG_DIR) -> ExperimentConfig:
        cfg = ExperimentConfig.load(config_dir / DIRECTIONS[self.direction])
        return cfg.replace(**dict(self.overrides)) if self.overrides else cfg


@dataclass
class Verdict:
    passed: bool
    message: str


def _plan() -> dict[int, list[PlannedRun]]:
    full = AblationFlags()
    plan = {
        1: [PlannedRun("mn_us_clamp", "mn_us", full, 5)],
        2: [PlannedRun("us_mn_clamp", "us_mn", full, 5)],
        3: [PlannedRun(f"us_mn_ablation/{name.lower().replace(' ', '_')}", "us_mn", flags, 3)
            for name, flags in ABLATION_ROWS.items()],
        4: [PlannedRun(f"mn_us_memory_{m}", "mn_us", full, SWEEP_SEEDS, (("mem_per_class", m),))
            for m in MEMORY_SIZES],
        5: [PlannedRun(f"{d}_inner_{s}", d, full, SWEEP_SEEDS, (("n_inner", s),))
            for d in DIRECTIONS for s in INNER_STEPS],
        6: [PlannedRun(f"{d}_threshold_{t}", d, full, SWEEP_SEEDS, (("pseudo_threshold", t),))
            for d in DIRECTIONS for t in THRESHOLDS],
    }
    return plan


PLAN = _plan()


def default_root() -> Path:
    return Path(os.environ.get("CLAMP_ACCEPTANCE_RUNS", "runs/acceptance"))


def usps_problem(data_dir: str | os.PathLike | None = None) -> str | None:
    """None when USPS loads, otherwise the loader's diagnostic."""
    try:
        load_usps(data_dir or default_data_dir())
    except DatasetUnavailable as e:
        return str(e)
    return None


def run_protocol(criterion: int, root: str | os.PathLike | None = None,
                 config_dir: Path = CONFIG_DIR, resume: bool = True) -> list[Path]:
    from .trainer import run_experiment

    root = Path(root) if root is not None else default_root()
    done = []
    for run in PLAN[criterion]:
        out = root / run.slug
        if (out / "summary.json").exists():
            done.append(out)
            continue
        run_experiment(run.config(config_dir), run.flags, run.repeats, out, resume=resume)
        done.append(out)
    return done


def _finals(run_dir: Path) -> list[float]:
    files = sorted(run_dir.glob("accmatrix_seed*.json"))
    return [100 * average_accuracy(AccuracyMatrix.load(f)) for f in files]


def _load(root: Path, run: PlannedRun) -> tuple[float, list[float]] | None:
    d = root / run.slug
    if not (d / "summary.json").exists():
        return None
    finals = _finals(d)
    if len(finals) < run.repeats:
        return None
    return float(np.mean(finals)), finals


def _wall(root: Path, run: PlannedRun) -> float:
    doc = json.loads((root / run.slug / "summary.json").read_text())
    return float(doc["wall_seconds"])


def _missing(criterion: int, root: Path) -> Verdict | None:
    absent = [r.slug for r in PLAN[criterion] if _load(root, r) is None]
    if not absent:
        return None
    why = usps_problem()
    cause = f"USPS unavailable: {why}" if why else "runs not executed yet"
    return Verdict(False, f"{cause}; missing completed runs under {root}: {', '.join(absent)} "
                          f"(produce them with scripts/run_acceptance_experiments.py {criterion})")


def _check_reproduction(target: float, slug: str) -> Callable[[Path], Verdict]:
    def check(root: Path) -> Verdict:
        mean, finals = _load(root, next(r for r in PLAN[1] + PLAN[2] if r.slug == slug))
        ok = mean >= target - 5.0
        return Verdict(ok, f"{slug}: {mean:.2f} over {len(finals)} seeds (need >= {target - 5.0:.2f})")
    return check


def _check_ablation(root: Path) -> Verdict:
    acc = {name: _load(root, run)[0] for name, run in zip(ABLATION_ROWS, PLAN[3])}
    rules = [
        ("Naive <= 25", acc["Naive"] <= 25.0),
        ("Baseline 3 >= Naive + 30", acc["Baseline 3"] >= acc["Naive"] + 30.0),
        ("Baseline 5 >= Baseline 4", acc["Baseline 5"] >= acc["Baseline 4"]),
        ("CLAMP >= Baseline 5 - 2", acc["CLAMP"] >= acc["Baseline 5"] - 2.0),
        ("CLAMP >= Naive + 50", acc["CLAMP"] >= acc["Naive"] + 50.0),
    ]
    failed = [name for name, ok in rules if not ok]
    table = ", ".join(f"{k} {v:.2f}" for k, v in acc.items())
    return Verdict(not failed, f"{table}; failed: {failed or 'none'}")


def _check_memory(root: Path) -> Verdict:
    acc = {m: _load(root, r)[0] for m, r in zip(MEMORY_SIZES, PLAN[4])}
    ok = acc[5] <= acc[50] - 8.0 and abs(acc[50] - acc[100]) <= 3.0
    return Verdict(ok, f"accuracy by exemplars/class {acc}")


def _check_inner(root: Path) -> Verdict:
    notes, ok = [], True
    for d in DIRECTIONS:
        one, two = (r for r in PLAN[5] if r.direction == d)
        a1, a2 = _load(root, one)[0], _load(root, two)[0]
        ratio = _wall(root, two) / max(_wall(root, one), 1e-9)
        ok &= abs(a1 - a2) <= 3.0 and ratio >= 1.3
        notes.append(f"{d}: acc {a1:.2f} vs {a2:.2f}, time ratio {ratio:.2f}")
    return Verdict(ok, "; ".join(notes))


def _check_threshold(root: Path) -> Verdict:
    notes, ok = [], True
    for d in DIRECTIONS:
        accs = [_load(root, r)[0] for r in PLAN[6] if r.direction == d]
        spread = max(accs) - min(accs)
        ok &= spread <= 3.0
        notes.append(f"{d}: spread {spread:.2f} over {dict(zip(THRESHOLDS, np.round(accs, 2)))}")
    return Verdict(ok, "; ".join(notes))


CHECKS: dict[int, Callable[[Path], Verdict]] = {
    1: _check_reproduction(84.98, "mn_us_clamp"),
    2: _check_reproduction(89.63, "us_mn_clamp"),
    3: _check_ablation,
    4: _check_memory,
    5: _check_inner,
    6: _check_threshold,
}


def check(criterion: int, root: str | os.PathLike | None = None) -> Verdict:
    root = Path(root) if root is not None else default_root()
    return _missing(criterion, root) or CHECKS[criterion](root)
