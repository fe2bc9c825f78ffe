"""Task loop: adversarial adaptation, meta-weighted source and target stages, replay."""
from __future__ import annotations

import csv
import errno
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ABLATION_ROWS, AblationFlags, ExperimentConfig
from .data import (ConfigurationError, DatasetUnavailable, TaskStream, batch_indices, gradient_phase,
                   load_digit_pair, load_image_folder_pair, make_synthetic_pair)
from .evaluation import (AccuracyMatrix, RunSummary, accuracy, average_accuracy, forgetting,
                         prediction_entropy)
from .losses import DivergenceError, compose_overall, domain_loss
from .memory import EpisodicMemory, MemoryBatch, end_of_task_update, sample_batch
from .meta import (DEFAULT_TRANSFORMS, MetaBatch, PseudoLabelConfig, TargetValidationConfig,
                   TransformSpec, build_source_validation, make_base_optimizer, meta_step,
                   predict_proba, pseudo_label, select_target_validation)
from .models import ConstantAssessor, build_assessor, build_base, snapshot_previous

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("step", "task", "epoch", "stage", "ce", "der", "distill", "domain", "total")
EPOCH_COLUMNS = ("task", "epoch", "ls", "lpa", "lt", "total")


class ResumeMismatch(RuntimeError):
    pass


class DiskFullError(OSError):
    pass


def discover_classes(root, domain: str) -> list[str]:
    base = Path(root) / domain
    if not base.is_dir():
        raise DatasetUnavailable(f"domain folder {base} not found")
    return sorted(p.name for p in base.iterdir() if p.is_dir())


def build_streams(cfg: ExperimentConfig) -> tuple[TaskStream, TaskStream]:
    d = cfg.data
    if d.kind == "digits":
        src, tgt = load_digit_pair(d.source, d.target, d.resize, d.split_sizes, d.data_dir,
                                   d.download, d.class_perm_seed)
    elif d.kind == "synthetic":
        per_task = d.split_sizes[0] if d.split_sizes else 2
        src, tgt = make_synthetic_pair(d.num_classes, d.samples_per_class, d.rotation_deg,
                                       d.offset, d.synthetic_seed, classes_per_task=per_task)
    elif d.kind == "image_folder":
        if d.root is None:
            raise ConfigurationError("image_folder data needs a root directory")
        names = d.class_names or discover_classes(d.root, d.source)
        src, tgt = load_image_folder_pair(d.root, d.source, d.target, names,
                                          d.split_sizes, d.resize, d.test_fraction,
                                          max_per_class=d.max_per_class)
    else:
        raise ConfigurationError(f"unknown data kind {d.kind!r}")
    if d.subsample:
        src, tgt = src.subsample(d.subsample, seed=1), tgt.subsample(d.subsample, seed=2)
    return src, tgt


def _seed_of(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


@dataclass
class StepTimer:
    meta_seconds: float = 0.0
    meta_steps: int = 0

    @property
    def per_step(self) -> float:
        return self.meta_seconds / self.meta_steps if self.meta_steps else 0.0


class Learner:
    """All state of one seeded run: networks, assessors, memories, optimisers, logs."""

    def __init__(self, cfg: ExperimentConfig, flags: AblationFlags,
                 source: TaskStream, target: TaskStream, seed: int = 0):
        if source.num_tasks != target.num_tasks:
            raise ConfigurationError("source and target streams need the same number of tasks")
        if source.input_shape != target.input_shape:
            raise ConfigurationError("source and target inputs must share a shape")
        self.cfg, self.flags, self.source, self.target, self.seed = cfg, flags, source, target, seed
        t = cfg.trainer
        data_ss, mem_ss, tf_ss, init_ss = np.random.SeedSequence(seed).spawn(4)
        self.rng_data = np.random.default_rng(data_ss)
        self.rng_mem = np.random.default_rng(mem_ss)
        self.rng_tf = np.random.default_rng(tf_ss)
        init_seed = _seed_of(init_ss)

        m = cfg.model
        self.bundle = build_base(m.backbone, source.total_classes, source.input_shape,
                                 seed=init_seed, feature_dim=m.feature_dim)
        kind = "image" if len(source.input_shape) == 3 else "vector"
        if flags.meta:
            self.assessor_s = build_assessor(kind, source.input_shape, m.assessor_recurrent,
                                             m.assessor_hidden, m.assessor_head, m.assessor_stage,
                                             seed=init_seed + 1)
            self.assessor_t = build_assessor(kind, source.input_shape, m.assessor_recurrent,
                                             m.assessor_hidden, m.assessor_head, m.assessor_stage,
                                             seed=init_seed + 2)
        else:
            self.assessor_s, self.assessor_t = ConstantAssessor(1.0), ConstantAssessor(1.0)
        self.mem_s = EpisodicMemory(t.mem_per_class, name="M_S")
        self.mem_t = EpisodicMemory(t.mem_per_class, name="M_T")
        net = self.bundle.net
        self.opt_base = make_base_optimizer(net.theta_phi(), t.outer_lr, t.momentum, t.weight_decay)
        self.opt_adv = torch.optim.SGD(net.theta_psi(), lr=t.adv_lr, momentum=t.momentum,
                                       weight_decay=t.weight_decay)
        self.transforms = tuple(TransformSpec(s.kind, noise_sigma=t.noise_sigma)
                                for s in DEFAULT_TRANSFORMS)
        self.acc = AccuracyMatrix()
        self.source_acc = AccuracyMatrix()
        self.trace: list[tuple[int, int, str]] = []
        self.loss_rows: list[dict] = []
        self.epoch_rows: list[dict] = []
        self.probe: list[tuple[int, int]] = []
        self.timer = StepTimer()
        self.step = 0
        self.tasks_done = 0
        self.elapsed = 0.0

    # -- schedule ---------------------------------------------------------

    def stages_for_epoch(self, epoch: int) -> list[str]:
        """Stage names run in 1-based ``epoch``."""
        t, f = self.cfg.trainer, self.flags
        if not f.pa:
            return ["source"] + (["target"] if f.pl else [])
        if t.interleave_pa:
            return ["adapt", "source"] + (["target"] if f.pl else [])
        if epoch <= t.pa_epochs:
            return ["adapt"]
        return ["source"] + (["target"] if f.pl else [])

    # -- logging ------------------------------------------------------------

    def _log_loss(self, k, epoch, stage, parts: dict):
        self.step += 1
        row = {"step": self.step, "task": k, "epoch": epoch, "stage": stage,
               "ce": 0.0, "der": 0.0, "distill": 0.0, "domain": 0.0, "total": 0.0}
        row.update(parts)
        self.loss_rows.append(row)
        return row

    # -- stages ------------------------------------------------------------

    def _pool(self, x: torch.Tensor, mem: EpisodicMemory, use: bool) -> torch.Tensor:
        if use and len(mem):
            return torch.cat([x, mem.all().inputs])
        return x

    def adaptation_stage(self, k: int, epoch: int) -> float:
        net, t = self.bundle.net, self.cfg.trainer
        src = self._pool(self.source.inputs(k), self.mem_s, self.flags.r1)
        tgt = self._pool(self.target.inputs(k), self.mem_t, self.flags.r2)
        bs = t.batch_size
        steps = math.ceil(min(len(src), len(tgt)) / bs)
        if t.n_outer:
            steps = min(steps, t.n_outer)
        order_s, order_t = self.rng_data.permutation(len(src)), self.rng_data.permutation(len(tgt))
        losses = []
        net.train()
        with gradient_phase("adapt"):
            for i in range(steps):
                xs = src[torch.from_numpy(order_s[i * bs:(i + 1) * bs])]
                xt = tgt[torch.from_numpy(order_t[i * bs:(i + 1) * bs])]
                ds = net.domain_score(net.feature(xs), reverse=True, coeff=t.grl_coeff)
                dt = net.domain_score(net.feature(xt), reverse=True, coeff=t.grl_coeff)
                loss = domain_loss(ds, dt)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite domain loss at task {k} epoch {epoch}")
                self.opt_adv.zero_grad(set_to_none=True)
                loss.backward()
                self.opt_adv.step()
                self.bundle.version += 1
                value = loss.item()
                losses.append(value)
                self._log_loss(k, epoch, "adapt", {"domain": value, "total": value})
        return float(np.mean(losses)) if losses else 0.0

    def _memory_batch(self, mem: EpisodicMemory, use: bool, n: int) -> MemoryBatch | None:
        if not use or len(mem) == 0:
            return None
        return MemoryBatch.stack(sample_batch(mem, n, self.rng_mem))

    def _timed_meta_step(self, assessor, train: MetaBatch, val: MetaBatch):
        t = self.cfg.trainer
        start = time.perf_counter()
        loss = meta_step(self.bundle, self.opt_base, assessor, train, val, t.inner_lr, t.n_inner,
                         t.temperature, meta=self.flags.meta, probe=self.probe)
        self.timer.meta_seconds += time.perf_counter() - start
        self.timer.meta_steps += 1
        return loss

    def _batches(self, n: int) -> list[np.ndarray]:
        batches = batch_indices(n, self.cfg.trainer.batch_size, self.rng_data)
        limit = self.cfg.trainer.n_outer
        return batches[:limit] if limit else batches

    def source_stage(self, k: int, epoch: int) -> float:
        x_task, y_task = self.source.inputs(k), self.source.labels(k)
        totals = []
        self.bundle.net.train()
        with gradient_phase("source"):
            for idx in self._batches(len(x_task)):
                sel = torch.from_numpy(idx)
                x, y = x_task[sel], y_task[sel]
                mem = self._memory_batch(self.mem_s, self.flags.r1, len(idx))
                train = MetaBatch(x, y, mem)
                xv, yv = build_source_validation(train.assessor_inputs(),
                                                 torch.cat([y, mem.labels]) if mem else y,
                                                 self.transforms, self.rng_tf)
                n = len(x)
                val_mem = None
                if mem is not None:
                    val_mem = MemoryBatch(xv[n:], mem.labels, mem.stored_logits, mem.tasks,
                                          mem.domain_tags)
                val = MetaBatch(xv[:n], yv[:n], val_mem)
                loss = self._timed_meta_step(self.assessor_s, train, val)
                row = self._log_loss(k, epoch, "source", loss.as_floats())
                totals.append(row["total"])
        return float(np.mean(totals)) if totals else 0.0

    def _target_validation(self, k: int) -> MetaBatch:
        x_task, y_task = self.source.inputs(k), self.source.labels(k)
        use_mem = self.flags.r1 and len(self.mem_s) > 0
        pool_x, pool_y = x_task, y_task
        if use_mem:
            mb = self.mem_s.all()
            pool_x, pool_y = torch.cat([x_task, mb.inputs]), torch.cat([y_task, mb.labels])
        cfg = TargetValidationConfig(self.cfg.trainer.val_per_class, self.cfg.trainer.literal_descending)
        pick = np.sort(select_target_validation(self.bundle.net, pool_x, pool_y.numpy(), cfg))
        cur, old = pick[pick < len(x_task)], pick[pick >= len(x_task)] - len(x_task)
        mem = None
        if len(old):
            o = torch.from_numpy(old)
            mem = MemoryBatch(mb.inputs[o], mb.labels[o], mb.stored_logits[o], mb.tasks[o],
                              mb.domain_tags[o])
        c = torch.from_numpy(cur)
        return MetaBatch(x_task[c], y_task[c], mem)

    def _relabel_target_memory(self):
        if not self.mem_t.entries:
            return
        probs = predict_proba(self.bundle.net, torch.stack([e.input for e in self.mem_t.entries]))
        for e, p in zip(self.mem_t.entries, probs):
            e.label = int(p.argmax())

    def target_stage(self, k: int, epoch: int) -> float | None:
        t = self.cfg.trainer
        x_t = self.target.inputs(k)
        pl = pseudo_label(self.bundle.net, x_t, PseudoLabelConfig(t.pseudo_threshold))
        if len(pl) == 0:
            log.info("task %d epoch %d: no pseudo labels above %.2f; target stage skipped",
                     k, epoch, t.pseudo_threshold)
            self.trace.append((k, epoch, "target-skipped"))
            return None
        if t.relabel_target_memory and self.flags.r2:
            self._relabel_target_memory()
        px = x_t[torch.from_numpy(pl.indices)]
        py = torch.from_numpy(pl.labels)
        val = self._target_validation(k)
        totals = []
        self.bundle.net.train()
        with gradient_phase("target"):
            for idx in self._batches(len(px)):
                sel = torch.from_numpy(idx)
                mem = self._memory_batch(self.mem_t, self.flags.r2, len(idx))
                loss = self._timed_meta_step(self.assessor_t, MetaBatch(px[sel], py[sel], mem), val)
                row = self._log_loss(k, epoch, "target", loss.as_floats())
                totals.append(row["total"])
        return float(np.mean(totals)) if totals else 0.0

    # -- task ---------------------------------------------------------------

    def run_task(self, k: int) -> list[float]:
        """Train on task ``k``, update memories, evaluate; returns the new accuracy row."""
        started = time.perf_counter()
        t = self.cfg.trainer
        for a in (self.assessor_s, self.assessor_t):
            a.reset_hidden()
        for epoch in range(1, t.epochs + 1):
            for a in (self.assessor_s, self.assessor_t):
                a.reset_hidden()
            ls = lpa = lt = 0.0
            for stage in self.stages_for_epoch(epoch):
                self.trace.append((k, epoch, stage))
                if stage == "adapt":
                    lpa = self.adaptation_stage(k, epoch)
                elif stage == "source":
                    ls = self.source_stage(k, epoch)
                else:
                    lt = self.target_stage(k, epoch) or 0.0
            self.epoch_rows.append({"task": k, "epoch": epoch, "ls": ls, "lpa": lpa, "lt": lt,
                                    "total": compose_overall(ls, lpa, lt)})
        self.end_of_task(k)
        row = self.evaluate(k)
        self.tasks_done = k
        self.elapsed += time.perf_counter() - started
        return row

    def end_of_task(self, k: int):
        classes = self.source.task(k).class_labels
        mem_s = self.mem_s if self.flags.r1 else None
        mem_t = self.mem_t if self.flags.r2 else None
        pseudo = (self.target.inputs(k)[:0], np.zeros(0, dtype=np.int64))
        if mem_t is not None:
            x_t = self.target.inputs(k)
            pl = pseudo_label(self.bundle.net, x_t, PseudoLabelConfig(self.cfg.trainer.pseudo_threshold))
            pseudo = (x_t[torch.from_numpy(pl.indices)], pl.labels)
        end_of_task_update(mem_s, mem_t, (self.source.inputs(k), self.source.labels(k).numpy()),
                           pseudo, self.bundle, classes, k, self.rng_mem)
        snapshot_previous(self.bundle)

    def evaluate(self, k: int) -> list[float]:
        net, bs = self.bundle.net, self.cfg.trainer.eval_batch_size
        row = [accuracy(net, self.target.inputs(j, "test"), self.target.eval_labels(j, "test"), bs)
               for j in range(1, k + 1)]
        src = [accuracy(net, self.source.inputs(j, "test"), self.source.eval_labels(j, "test"), bs)
               for j in range(1, k + 1)]
        self.acc.append_row(row)
        self.source_acc.append_row(src)
        log.info("seed %d task %d: target row %s (avg %.4f)", self.seed, k,
                 [round(v, 4) for v in row], sum(row) / k)
        return row

    def target_entropy(self, log_base: float | None = None) -> float:
        probs = [predict_proba(self.bundle.net, self.target.inputs(j, "test"))
                 for j in range(1, self.tasks_done + 1)]
        return prediction_entropy([p for p in probs if len(p)], log_base)

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION, "seed": self.seed, "tasks_done": self.tasks_done,
            "net": self.bundle.net.state_dict(), "bundle_version": self.bundle.version,
            "prev": self.bundle.prev_snapshot.state_dict() if self.bundle.prev_snapshot else None,
            "assessor_s": self.assessor_s.state_dict(), "assessor_t": self.assessor_t.state_dict(),
            "opt_base": self.opt_base.state_dict(), "opt_adv": self.opt_adv.state_dict(),
            "mem_s": self.mem_s.state_dict(), "mem_t": self.mem_t.state_dict(),
            "rng": [g.bit_generator.state for g in (self.rng_data, self.rng_mem, self.rng_tf)],
            "torch_rng": torch.get_rng_state(),
            "acc": self.acc.rows, "source_acc": self.source_acc.rows,
            "trace": self.trace, "loss_rows": self.loss_rows, "epoch_rows": self.epoch_rows,
            "step": self.step, "elapsed": self.elapsed,
            "timer": (self.timer.meta_seconds, self.timer.meta_steps),
        }

    def load_state_dict(self, state: dict):
        if state.get("version") != CHECKPOINT_VERSION:
            raise ResumeMismatch(f"checkpoint version {state.get('version')} != {CHECKPOINT_VERSION}")
        if state["seed"] != self.seed:
            raise ResumeMismatch(f"checkpoint seed {state['seed']} != {self.seed}")
        self.bundle.net.load_state_dict(state["net"])
        self.bundle.version = state["bundle_version"]
        if state["prev"] is not None:
            snapshot_previous(self.bundle)
            self.bundle.prev_snapshot.load_state_dict(state["prev"])
        self.assessor_s.load_state_dict(state["assessor_s"])
        self.assessor_t.load_state_dict(state["assessor_t"])
        self.opt_base.load_state_dict(state["opt_base"])
        self.opt_adv.load_state_dict(state["opt_adv"])
        self.mem_s.load_state_dict(state["mem_s"])
        self.mem_t.load_state_dict(state["mem_t"])
        for g, s in zip((self.rng_data, self.rng_mem, self.rng_tf), state["rng"]):
            g.bit_generator.state = s
        torch.set_rng_state(state["torch_rng"])
        self.acc = AccuracyMatrix(state["acc"])
        self.source_acc = AccuracyMatrix(state["source_acc"])
        self.trace = [tuple(x) for x in state["trace"]]
        self.loss_rows, self.epoch_rows = state["loss_rows"], state["epoch_rows"]
        self.step, self.elapsed, self.tasks_done = state["step"], state["elapsed"], state["tasks_done"]
        self.timer = StepTimer(*state["timer"])


# ---------------------------------------------------------------------------
# experiment driver

def _guard_disk(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except OSError as e:
        if e.errno == errno.ENOSPC:
            raise DiskFullError(e.errno, f"disk full while writing run output: {e}") from e
        raise


def _write_csv(path: Path, columns, rows):
    def write():
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
    _guard_disk(write)


def _run_record(cfg: ExperimentConfig, flags: AblationFlags, repeats: int) -> dict:
    return {"config": cfg.to_dict(), "flags": flags.label(), "repeats": repeats}


@dataclass
class ExperimentResult:
    out_dir: Path
    summary: RunSummary
    matrices: list[AccuracyMatrix]
    learners: list[Learner] = field(default_factory=list, repr=False)


def _seed_outputs(out: Path, i: int, learner: Learner):
    learner.acc.save(out / f"accmatrix_seed{i}.json")
    learner.source_acc.save(out / f"source_accmatrix_seed{i}.json")
    _write_csv(out / f"losses_seed{i}.csv", LOSS_COLUMNS, learner.loss_rows)
    _write_csv(out / f"epochs_seed{i}.csv", EPOCH_COLUMNS, learner.epoch_rows)


def run_experiment(cfg: ExperimentConfig, flags: AblationFlags = AblationFlags(), repeats: int = 1,
                   out_dir: str | os.PathLike | None = None, resume: bool = False,
                   streams: tuple[TaskStream, TaskStream] | None = None,
                   keep_learners: bool = False) -> ExperimentResult:
    """Run ``repeats`` seeds (``cfg.trainer.seed + i``) and write the run directory.

    With ``resume`` an existing directory is continued from the last finished
    task of each seed; its stored config must match.
    """
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    out = Path(out_dir) if out_dir is not None else Path("runs") / cfg.name
    record = _run_record(cfg, flags, repeats)
    cfg_path = out / "config.json"
    if resume and cfg_path.exists():
        stored = json.loads(cfg_path.read_text())
        if stored != json.loads(json.dumps(record)):
            raise ResumeMismatch(f"{cfg_path} does not match the requested configuration")
    elif (out / "checkpoints").exists():
        shutil.rmtree(out / "checkpoints")
    ckpt_dir = out / "checkpoints"
    _guard_disk(ckpt_dir.mkdir, parents=True, exist_ok=True)
    _guard_disk(cfg_path.write_text, json.dumps(record, indent=2))

    source, target = streams if streams is not None else build_streams(cfg)
    K = source.num_tasks
    finals, matrices, learners, metric_rows = [], [], [], []
    for i in range(repeats):
        seed = cfg.trainer.seed + i
        learner = Learner(cfg, flags, source, target, seed)
        ckpt = ckpt_dir / f"seed{i}.pt"
        if resume and ckpt.exists():
            learner.load_state_dict(torch.load(ckpt, weights_only=False))
            log.info("seed %d resumed after task %d", seed, learner.tasks_done)
        for k in range(learner.tasks_done + 1, K + 1):
            try:
                learner.run_task(k)
            except DivergenceError:
                _guard_disk(torch.save, learner.state_dict(), ckpt_dir / f"seed{i}_diverged.pt")
                log.error("seed %d diverged in task %d; state saved to checkpoints/", seed, k)
                raise
            if cfg.trainer.checkpoint:
                _guard_disk(torch.save, learner.state_dict(), ckpt)
        _seed_outputs(out, i, learner)
        final = average_accuracy(learner.acc)
        finals.append(final)
        matrices.append(learner.acc)
        metric_rows.append({
            "seed": seed, "final_average_accuracy": final, "forgetting": forgetting(learner.acc),
            "entropy": learner.target_entropy(), "wall_seconds": learner.elapsed,
            "seconds_per_meta_step": learner.timer.per_step,
            **{f"avg_after_task_{k}": average_accuracy(learner.acc, k) for k in range(1, K + 1)},
        })
        if keep_learners:
            learners.append(learner)

    _write_csv(out / "metrics.csv", list(metric_rows[0]), metric_rows)
    curve = [float(np.mean([average_accuracy(m, k) for m in matrices])) for k in range(1, K + 1)]
    summary = RunSummary.from_values(
        finals, per_task_curve=curve,
        entropy=float(np.mean([r["entropy"] for r in metric_rows])),
        wall_seconds=float(np.mean([r["wall_seconds"] for r in metric_rows])))
    doc = {"name": cfg.name, "flags": flags.label(), **summary.__dict__,
           "seconds_per_meta_step": float(np.mean([r["seconds_per_meta_step"] for r in metric_rows]))}
    _guard_disk((out / "summary.json").write_text, json.dumps(doc, indent=2))
    return ExperimentResult(out, summary, matrices, learners)


def run_ablation_suite(cfg: ExperimentConfig, repeats: int = 3,
                       out_dir: str | os.PathLike = "runs/ablation",
                       rows: dict[str, AblationFlags] | None = None,
                       streams: tuple[TaskStream, TaskStream] | None = None) -> list[dict]:
    """One experiment per ablation row; writes ``ablation.csv`` under ``out_dir``."""
    rows = rows or ABLATION_ROWS
    out = Path(out_dir)
    streams = streams if streams is not None else build_streams(cfg)
    table = []
    for name, flags in rows.items():
        slug = name.lower().replace(" ", "_")
        res = run_experiment(cfg, flags, repeats, out / slug, streams=streams)
        table.append({"method": name, "flags": flags.label(),
                      "mean": res.summary.mean_accuracy, "std": res.summary.std_accuracy,
                      "seeds": res.summary.seeds, "run_dir": str(res.out_dir)})
    _write_csv(out / "ablation.csv", list(table[0]), table)
    return table
