import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from clamp.config import DataConfig, ExperimentConfig, ModelConfig, TrainerConfig
from clamp.trainer import build_streams

torch.set_num_threads(1)

settings.register_profile("ci", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def tiny_config(**trainer) -> ExperimentConfig:
    """Two 2-class tasks of 2-D clusters; a full run takes well under a second."""
    t = dict(epochs=4, pa_epochs=2, batch_size=32, outer_lr=0.01, inner_lr=1e-3, mem_per_class=10)
    t.update(trainer)
    return ExperimentConfig(
        "tiny",
        DataConfig(kind="synthetic", num_classes=4, split_sizes=[2, 2], samples_per_class=60,
                   rotation_deg=20.0, offset=0.5),
        ModelConfig(backbone="mlp_plus", assessor_hidden=8, assessor_recurrent=4, assessor_head=4),
        TrainerConfig(**t))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_streams(tiny_cfg):
    return build_streams(tiny_cfg)


# ---------------------------------------------------------------------------
# one summary line per acceptance criterion

_CRITERIA: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(label, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: (len(s.split()[0]), s)):
        ok = all(o == "passed" for o in _CRITERIA[label])
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")
