import json
import subprocess
import sys

import pytest

from clamp.cli import build_parser, load_config, main

from conftest import tiny_config


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.json"
    tiny_config(epochs=2, pa_epochs=1).save(p)
    return p


def test_run_writes_a_run_directory(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_file), "--flags", "pa,r1", "--seeds", "2", "--out", str(out)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["seeds"] == 2 and 0.0 <= doc["mean"] <= 1.0
    record = json.loads((out / "config.json").read_text())
    assert record["flags"] == "pa,r1"
    assert main(["run", "--config", str(cfg_file), "--flags", "pa,r1", "--seeds", "2", "--out", str(out),
                 "--resume"]) == 0


def test_overrides_reach_the_trainer_config(cfg_file):
    args = build_parser().parse_args(["run", "--config", str(cfg_file), "--inner-steps", "2",
                                      "--pseudo-threshold", "0.7", "--mem-per-class", "5",
                                      "--interleave-pa", "--subsample", "30"])
    cfg = load_config(args)
    assert cfg.trainer.n_inner == 2 and cfg.trainer.pseudo_threshold == 0.7
    assert cfg.trainer.mem_per_class == 5 and cfg.trainer.interleave_pa
    assert cfg.data.subsample == 30


def test_baseline_ablation_and_report(cfg_file, tmp_path, capsys):
    assert main(["baseline", "--kind", "joint", "--config", str(cfg_file), "--out", str(tmp_path / "j")]) == 0
    assert main(["ablation", "--config", str(cfg_file), "--out", str(tmp_path / "abl")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert sum(line.startswith(("Naive", "PA", "Baseline", "CLAMP")) for line in lines) == 8
    assert main(["report", "--runs", str(tmp_path / "abl"), str(tmp_path / "j"),
                 "--out", str(tmp_path / "rep"), "--log-base", "2"]) == 0
    assert (tmp_path / "rep" / "report.md").exists()


def test_missing_dataset_and_bad_flags_exit_with_code_two(tmp_path, capsys):
    p = tmp_path / "usps.json"
    doc = tiny_config().to_dict()
    doc["data"].update(kind="digits", source="mnist", target="usps", data_dir=str(tmp_path / "empty"),
                       split_sizes=[2] * 5)
    doc["model"]["backbone"] = "lenet_plus"
    p.write_text(json.dumps(doc))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "dataset unavailable" in capsys.readouterr().err
    assert main(["run", "--config", str(p), "--flags", "pa,ewc"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "clamp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "baseline" in proc.stdout
