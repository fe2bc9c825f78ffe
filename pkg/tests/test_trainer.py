import csv
import errno
import json

import numpy as np
import pytest
import torch

from clamp import memory as memory_mod
from clamp import trainer as trainer_mod
from clamp.config import ABLATION_ROWS, AblationFlags
from clamp.data import batch_indices
from clamp.losses import DivergenceError
from clamp.models import build_base
from clamp.trainer import (LOSS_COLUMNS, DiskFullError, Learner, ResumeMismatch, run_ablation_suite,
                           run_experiment)

from conftest import tiny_config

ALL = AblationFlags()
NONE = AblationFlags.parse("none")


def _learner(cfg, streams, flags=ALL, seed=0):
    return Learner(cfg, flags, *streams, seed=seed)


def test_stage_schedule_follows_the_adaptation_window(tiny_cfg, tiny_streams):
    L = _learner(tiny_cfg, tiny_streams)
    L.run_task(1)
    stages = {e: [s for (k, ep, s) in L.trace if ep == e and s != "target-skipped"] for e in range(1, 5)}
    assert stages[1] == stages[2] == ["adapt"]
    assert stages[3] == stages[4] == ["source", "target"]
    logged = {(r["epoch"], r["stage"]) for r in L.loss_rows}
    assert not any(s == "adapt" and e > 2 for e, s in logged)
    assert not any(s in ("source", "target") and e <= 2 for e, s in logged)


def test_schedule_variants(tiny_cfg, tiny_streams):
    assert _learner(tiny_cfg, tiny_streams, AblationFlags.parse("pl,r1")).stages_for_epoch(1) == ["source", "target"]
    assert _learner(tiny_cfg, tiny_streams, NONE).stages_for_epoch(1) == ["source"]
    inter = _learner(tiny_cfg.replace(interleave_pa=True), tiny_streams)
    assert inter.stages_for_epoch(1) == inter.stages_for_epoch(4) == ["adapt", "source", "target"]


def test_memory_update_and_snapshot_once_per_task(tiny_cfg, tiny_streams, monkeypatch):
    calls = []
    real_update, real_snap = trainer_mod.end_of_task_update, trainer_mod.snapshot_previous
    monkeypatch.setattr(trainer_mod, "end_of_task_update",
                        lambda *a, **k: (calls.append(("mem", a[6])), real_update(*a, **k))[1])
    monkeypatch.setattr(trainer_mod, "snapshot_previous",
                        lambda b: (calls.append(("snap", None)), real_snap(b))[1])
    L = _learner(tiny_cfg, tiny_streams)
    for k in (1, 2):
        L.run_task(k)
    assert calls == [("mem", 1), ("snap", None), ("mem", 2), ("snap", None)]
    assert len(L.mem_s) <= 10 * 4
    # stored logits are the snapshot's outputs
    batch = L.mem_s.all()
    last = batch.tasks == 2
    assert torch.equal(batch.stored_logits[last], L.bundle.prev_logits(batch.inputs[last]))


def test_meta_flag_changes_weights_but_not_the_stage_trace(tiny_cfg, tiny_streams):
    a, b = _learner(tiny_cfg, tiny_streams, ALL), _learner(tiny_cfg, tiny_streams, AblationFlags.parse("pa,pl,r1,r2"))
    for L in (a, b):
        L.run_task(1)
    strip = lambda tr: [t for t in tr if t[2] != "target-skipped"]
    assert strip(a.trace) == strip(b.trace)


def test_without_r1_no_source_memory_sample_reaches_a_gradient(tiny_cfg, tiny_streams, monkeypatch):
    drawn = []
    real = trainer_mod.sample_batch
    monkeypatch.setattr(trainer_mod, "sample_batch", lambda mem, n, rng: (drawn.append(mem.name), real(mem, n, rng))[1])
    L = _learner(tiny_cfg.replace(pseudo_threshold=0.3), tiny_streams, AblationFlags.parse("pa,pl,meta,r2"))
    pools = []
    real_pool = L._pool
    L._pool = lambda x, mem, use: (pools.append((mem.name, use)), real_pool(x, mem, use))[1]
    for k in (1, 2):
        L.run_task(k)
    assert "M_S" not in drawn and "M_T" in drawn
    assert len(L.mem_s) == 0
    assert all(not use for name, use in pools if name == "M_S")


def test_same_seed_gives_identical_matrices(tiny_cfg, tiny_streams, tmp_path):
    a = run_experiment(tiny_cfg, ALL, 1, tmp_path / "a", streams=tiny_streams)
    b = run_experiment(tiny_cfg, ALL, 1, tmp_path / "b", streams=tiny_streams)
    assert a.matrices[0].rows == b.matrices[0].rows
    assert (tmp_path / "a" / "losses_seed0.csv").read_text() == (tmp_path / "b" / "losses_seed0.csv").read_text()


def test_run_directory_layout(tiny_cfg, tiny_streams, tmp_path):
    res = run_experiment(tiny_cfg, ALL, 2, tmp_path / "run", streams=tiny_streams)
    out = res.out_dir
    for name in ("config.json", "metrics.csv", "summary.json", "accmatrix_seed0.json",
                 "accmatrix_seed1.json", "losses_seed0.csv", "epochs_seed1.csv",
                 "checkpoints/seed0.pt", "checkpoints/seed1.pt"):
        assert (out / name).exists(), name
    record = json.loads((out / "config.json").read_text())
    assert record["config"]["trainer"] == tiny_cfg.to_dict()["trainer"]
    assert record["flags"] == "pa,pl,meta,r1,r2"
    with open(out / "losses_seed0.csv") as fh:
        assert tuple(csv.DictReader(fh).fieldnames) == LOSS_COLUMNS
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["seed"]) for r in rows] == [0, 1]
    assert res.summary.seeds == 2 and res.summary.std_accuracy >= 0
    single = run_experiment(tiny_cfg, ALL, 1, tmp_path / "one", streams=tiny_streams)
    assert single.summary.std_accuracy == 0.0 and single.summary.single_run


def test_epoch_totals_match_logged_stage_losses(tiny_cfg, tiny_streams):
    L = _learner(tiny_cfg, tiny_streams)
    L.run_task(1)
    for row in L.epoch_rows:
        e = row["epoch"]
        by_stage = {}
        for r in L.loss_rows:
            if r["epoch"] == e and r["task"] == 1:
                by_stage.setdefault(r["stage"], []).append(r["total"])
        mean = {s: float(np.mean(v)) for s, v in by_stage.items()}
        expected = mean.get("source", 0) - mean.get("adapt", 0) + mean.get("target", 0)
        assert row["total"] == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_resume_after_interruption_matches_an_uninterrupted_run(tiny_cfg, tiny_streams, tmp_path,
                                                               monkeypatch):
    ref = run_experiment(tiny_cfg, ALL, 1, tmp_path / "ref", streams=tiny_streams)
    real = Learner.run_task

    def crash_on_task_two(self, k):
        if k == 2:
            raise KeyboardInterrupt
        return real(self, k)

    monkeypatch.setattr(Learner, "run_task", crash_on_task_two)
    with pytest.raises(KeyboardInterrupt):
        run_experiment(tiny_cfg, ALL, 1, tmp_path / "cut", streams=tiny_streams)
    assert (tmp_path / "cut" / "checkpoints" / "seed0.pt").exists()
    monkeypatch.setattr(Learner, "run_task", real)
    resumed = run_experiment(tiny_cfg, ALL, 1, tmp_path / "cut", resume=True, streams=tiny_streams)
    assert resumed.matrices[0].rows == ref.matrices[0].rows
    assert (tmp_path / "cut" / "losses_seed0.csv").read_text() == (tmp_path / "ref" / "losses_seed0.csv").read_text()


def test_resume_with_a_different_config_is_refused(tiny_cfg, tiny_streams, tmp_path):
    run_experiment(tiny_cfg, ALL, 1, tmp_path / "r", streams=tiny_streams)
    with pytest.raises(ResumeMismatch):
        run_experiment(tiny_cfg.replace(epochs=5), ALL, 1, tmp_path / "r", resume=True,
                       streams=tiny_streams)


def test_divergence_saves_a_checkpoint(tiny_cfg, tiny_streams, tmp_path, monkeypatch):
    monkeypatch.setattr(trainer_mod, "domain_loss", lambda s, t: (s.sum() + t.sum()) * float("nan"))
    with pytest.raises(DivergenceError):
        run_experiment(tiny_cfg, ALL, 1, tmp_path / "d", streams=tiny_streams)
    assert (tmp_path / "d" / "checkpoints" / "seed0_diverged.pt").exists()


def test_disk_full_is_explicit(tiny_cfg, tiny_streams, tmp_path, monkeypatch):
    def full(*a, **k):
        raise OSError(errno.ENOSPC, "No space left on device")
    monkeypatch.setattr(trainer_mod.torch, "save", full)
    with pytest.raises(DiskFullError):
        run_experiment(tiny_cfg, ALL, 1, tmp_path / "f", streams=tiny_streams)


def test_naive_run_equals_a_hand_rolled_cross_entropy_loop(tiny_cfg, tiny_streams):
    src, tgt = tiny_streams
    L = _learner(tiny_cfg, tiny_streams, NONE, seed=3)
    for k in (1, 2):
        L.run_task(k)

    t = tiny_cfg.trainer
    data_ss, _, _, init_ss = np.random.SeedSequence(3).spawn(4)
    rng = np.random.default_rng(data_ss)
    net = build_base("mlp_plus", 4, (2,), seed=int(init_ss.generate_state(1)[0])).net
    opt = torch.optim.SGD(net.theta_phi(), lr=t.outer_lr, momentum=t.momentum, weight_decay=t.weight_decay)
    for k in (1, 2):
        x, y = src.inputs(k), src.labels(k)
        for _ in range(t.epochs):
            for idx in batch_indices(len(x), t.batch_size, rng):
                sel = torch.from_numpy(idx)
                loss = torch.nn.functional.cross_entropy(net(x[sel]), y[sel])
                opt.zero_grad()
                loss.backward()
                opt.step()
    for p, q in zip(net.parameters(), L.bundle.net.parameters()):
        assert torch.allclose(p, q, atol=1e-6, rtol=0)
    assert len(L.mem_s) == len(L.mem_t) == 0


def test_ablation_suite_writes_one_table(tiny_streams, tmp_path):
    cfg = tiny_config(epochs=2, pa_epochs=1)
    rows = {k: ABLATION_ROWS[k] for k in ("Naive", "Baseline 3", "CLAMP")}
    table = run_ablation_suite(cfg, 1, tmp_path / "abl", rows=rows, streams=tiny_streams)
    assert [r["method"] for r in table] == list(rows)
    assert (tmp_path / "abl" / "ablation.csv").exists()
    assert (tmp_path / "abl" / "baseline_3" / "accmatrix_seed0.json").exists()


def test_ablation_rows_flag_pattern():
    pattern = {name: "".join("x" if getattr(f, n) else "." for n in ("pa", "pl", "meta", "r1", "r2"))
               for name, f in ABLATION_ROWS.items()}
    assert pattern == {"Naive": ".....", "PA": "x....", "Baseline 1": "xx...", "Baseline 2": "xxx..",
                       "Baseline 3": "x..x.", "Baseline 4": "xx.x.", "Baseline 5": "xx.xx",
                       "CLAMP": "xxxxx"}
