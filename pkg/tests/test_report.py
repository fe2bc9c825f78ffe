import csv

import numpy as np
import pytest

from clamp.baselines import run_baseline
from clamp.config import ABLATION_ROWS
from clamp.evaluation import AccuracyMatrix, average_accuracy
from clamp.references import DIGITS_TABLE, direction_key
from clamp.report import MalformedRun, load_run, render_report
from clamp.trainer import run_ablation_suite, run_experiment

from conftest import tiny_config


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    from clamp.trainer import build_streams
    root = tmp_path_factory.mktemp("runs")
    cfg = tiny_config(epochs=2, pa_epochs=1)
    streams = build_streams(cfg)
    clamp = run_experiment(cfg, repeats=2, out_dir=root / "clamp", streams=streams).out_dir
    naive = run_baseline("naive", cfg, 2, root / "naive", streams=streams).out_dir
    run_ablation_suite(cfg, 1, root / "ablation", streams=streams)
    return root, clamp, naive


def test_single_run_has_curves_but_no_comparison(runs, tmp_path):
    _, clamp, _ = runs
    res = render_report([clamp], tmp_path / "one")
    md = (tmp_path / "one" / "report.md").read_text()
    assert "Reported" not in md and "| Method" not in md
    assert "reported_mean" not in res["rows"][0]
    for stem in ("accuracy_vs_task", "first_task_retention", "loss_trajectories"):
        assert (tmp_path / "one" / f"{stem}.png").exists()
        assert (tmp_path / "one" / f"{stem}.svg").exists()


def test_table_means_recompute_from_raw_matrices(runs, tmp_path):
    _, clamp, naive = runs
    res = render_report([clamp, naive], tmp_path / "two")
    for row, d in zip(res["rows"], (clamp, naive)):
        finals = [100 * average_accuracy(AccuracyMatrix.load(p)) for p in sorted(d.glob("accmatrix_seed*.json"))]
        assert row["mean"] == pytest.approx(np.mean(finals), abs=1e-12)
        assert row["std"] == pytest.approx(np.std(finals, ddof=1), abs=1e-12)
    assert [r["method"] for r in res["rows"]] == ["CLAMP", "Source Only"]
    with open(tmp_path / "two" / "report.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_ablation_directory_gives_eight_rows_in_order(runs, tmp_path):
    root, _, _ = runs
    res = render_report([root / "ablation"], tmp_path / "abl")
    assert [r["method"] for r in res["rows"]] == list(ABLATION_ROWS)
    md = (tmp_path / "abl" / "report.md").read_text()
    assert md.count("\n| ") >= 9


def test_malformed_directories_are_skipped(runs, tmp_path, caplog):
    _, clamp, _ = runs
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "config.json").write_text("{not json")
    with pytest.raises(MalformedRun):
        load_run(bad)
    res = render_report([clamp, bad, tmp_path / "missing"], tmp_path / "out")
    assert len(res["rows"]) == 1
    assert "skipping run" in caplog.text
    with pytest.raises(MalformedRun):
        render_report([bad])


def test_reference_columns_for_digit_runs(runs, tmp_path):
    _, clamp, naive = runs
    rec = load_run(clamp)
    rec.direction = direction_key("mnist", "usps")
    from clamp.report import comparison_rows
    row = comparison_rows([rec])[0]
    assert (row["reported_mean"], row["reported_std"]) == DIGITS_TABLE["CLAMP"]["mn_us"]
    assert direction_key("usps", "mnist") == "us_mn" and direction_key("a", "b") is None


def test_log_base_rescales_entropy(runs, tmp_path):
    _, clamp, naive = runs
    nat = render_report([clamp, naive], tmp_path / "e")["rows"][0]["entropy"]
    bits = render_report([clamp, naive], tmp_path / "b", log_base=2)["rows"][0]["entropy"]
    assert bits == pytest.approx(nat / np.log(2))
