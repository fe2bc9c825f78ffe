"""Accuracy matrices, entropy, Welch's t-test and embedding export."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch


class IncompleteRow(ValueError):
    pass


class AccuracyMatrix:
    """Lower-triangular ``a[k][j]``: accuracy on task j's target test set after task k (1-based)."""

    def __init__(self, rows: Sequence[Sequence[float]] | None = None):
        self.rows: list[list[float]] = []
        for r in rows or []:
            self.append_row(r)

    def append_row(self, row: Sequence[float]):
        row = [float(v) for v in row]
        k = len(self.rows) + 1
        if len(row) > k:
            raise ValueError(f"row {k} may hold at most {k} entries")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def row(self, k: int) -> list[float]:
        r = self.rows[k - 1]
        if len(r) < k:
            missing = [j for j in range(len(r) + 1, k + 1)]
            raise IncompleteRow(f"row {k} is missing tasks j={missing}")
        return r

    def to_json(self) -> dict:
        return {f"task_{k}": r for k, r in enumerate(self.rows, start=1)}

    @classmethod
    def from_json(cls, doc: dict) -> "AccuracyMatrix":
        keys = sorted(doc, key=lambda s: int(s.split("_")[1]))
        return cls([doc[k] for k in keys])

    def save(self, path: str | os.PathLike):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AccuracyMatrix":
        return cls.from_json(json.loads(Path(path).read_text()))

    def as_array(self) -> np.ndarray:
        n = len(self.rows)
        out = np.full((n, n), np.nan)
        for i, r in enumerate(self.rows):
            out[i, :len(r)] = r
        return out


def average_accuracy(mat: AccuracyMatrix, k: int | None = None) -> float:
    """Unweighted mean of row ``k`` (default: the last row)."""
    k = len(mat) if k is None else k
    row = mat.row(k)
    return sum(row[:k]) / k


def forgetting(mat: AccuracyMatrix) -> float:
    """Mean over tasks j < K of (best earlier accuracy - final accuracy). Supplementary metric."""
    a = mat.as_array()
    K = len(mat)
    if K < 2:
        return 0.0
    drops = [np.nanmax(a[j:K - 1, j]) - a[K - 1, j] for j in range(K - 1)]
    return float(np.mean(drops))


def prediction_entropy(prob_batches: Iterable[torch.Tensor | np.ndarray], log_base: float | None = None) -> float:
    """Mean per-sample entropy; natural log unless ``log_base`` is given."""
    total, n = 0.0, 0
    for p in prob_batches:
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            p = p[None]
        if (p < 0).any():
            raise ValueError("probabilities must be non-negative")
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("each probability vector must sum to 1")
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
        total += h.sum()
        n += len(p)
    if n == 0:
        raise ValueError("no probability vectors given")
    mean = total / n
    return mean / math.log(log_base) if log_base else mean


def welch_t(sample_a: tuple[float, float, int], sample_b: tuple[float, float, int]) -> tuple[float, float]:
    """Welch's two-sample t from (mean, sample std, n); positive when a's mean is larger."""
    from scipy import stats

    (ma, sa, na), (mb, sb, nb) = sample_a, sample_b
    if na < 2 or nb < 2:
        raise ValueError("each sample needs n >= 2")
    if sa < 0 or sb < 0:
        raise ValueError("standard deviations must be non-negative")
    if sa == 0 and sb == 0:
        if ma == mb:
            return 0.0, 1.0
        return math.copysign(math.inf, ma - mb), 0.0
    res = stats.ttest_ind_from_stats(ma, sa, na, mb, sb, nb, equal_var=False)
    return float(res.statistic), float(res.pvalue)


@torch.no_grad()
def accuracy(net, x: torch.Tensor, y: torch.Tensor, batch_size: int = 512) -> float:
    if len(x) == 0:
        return 0.0
    was = net.training
    net.eval()
    correct = 0
    for i in range(0, len(x), batch_size):
        correct += (net(x[i:i + batch_size]).argmax(dim=1) == y[i:i + batch_size]).sum().item()
    net.train(was)
    return correct / len(x)


@torch.no_grad()
def export_embeddings(net, inputs: torch.Tensor, labels, domain_tags, task_ids,
                      path: str | os.PathLike, batch_size: int = 512) -> Path:
    """CSV rows of (f_theta(x), label, domain, task); floats written with 9 significant digits."""
    path = Path(path)
    was = net.training
    net.eval()
    feats = [net.feature(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    net.train(was)
    dim = net.feature_dim
    feats = torch.cat(feats).numpy() if feats else np.zeros((0, dim), dtype=np.float32)
    labels, domain_tags, task_ids = (np.broadcast_to(np.asarray(a), (len(inputs),))
                                     for a in (labels, domain_tags, task_ids))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dim)] + ["label", "domain", "task"])
        for f, y, d, t in zip(feats, labels, domain_tags, task_ids):
            w.writerow([f"{v:.9g}" for v in f] + [int(y), int(d), int(t)])
    return path


def read_embeddings(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 3
    feats = np.array([[np.float32(v) for v in r[:dim]] for r in body], dtype=np.float32).reshape(-1, dim)
    meta = np.array([[int(v) for v in r[dim:]] for r in body], dtype=np.int64).reshape(-1, 3)
    return feats, meta


@dataclass
class RunSummary:
    mean_accuracy: float
    std_accuracy: float
    seeds: int
    per_seed: list[float]
    per_task_curve: list[float] = field(default_factory=list)
    entropy: float | None = None
    wall_seconds: float | None = None
    single_run: bool = False

    @classmethod
    def from_values(cls, values: Sequence[float], **kw) -> "RunSummary":
        values = [float(v) for v in values]
        if not values:
            raise ValueError("need at least one seed")
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        return cls(float(np.mean(values)), std, len(values), values,
                   single_run=len(values) == 1, **kw)
