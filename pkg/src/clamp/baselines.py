"""Reference learners sharing the CLAMP data order, init seeds and evaluation."""
from __future__ import annotations

import enum
import os

from .config import AblationFlags, ExperimentConfig
from .data import TaskStream, merge_tasks
from .trainer import ExperimentResult, build_streams, run_experiment


class BaselineKind(str, enum.Enum):
    NAIVE = "naive"   # sequential fine-tuning on source labels only
    DANN = "dann"     # adversarial alignment every epoch, no replay, no meta-weights
    JOINT = "joint"   # one task holding every class, the upper bound

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown baseline {text!r}; choose from {[k.value for k in cls]}") from None


NO_MECHANISMS = AblationFlags(False, False, False, False, False)
DANN_FLAGS = AblationFlags(pa=True, pl=False, meta=False, r1=False, r2=False)


def baseline_setup(kind: BaselineKind | str, cfg: ExperimentConfig,
                   streams: tuple[TaskStream, TaskStream]):
    """(config, flags, streams) for a baseline; the config keeps every shared field."""
    kind = BaselineKind.parse(kind) if isinstance(kind, str) else kind
    if kind is BaselineKind.NAIVE:
        return cfg, NO_MECHANISMS, streams
    if kind is BaselineKind.DANN:
        return cfg.replace(interleave_pa=True), DANN_FLAGS, streams
    src, tgt = streams
    return cfg, NO_MECHANISMS, (merge_tasks(src), merge_tasks(tgt))


def run_baseline(kind: BaselineKind | str, cfg: ExperimentConfig, repeats: int = 1,
                 out_dir: str | os.PathLike | None = None,
                 streams: tuple[TaskStream, TaskStream] | None = None,
                 keep_learners: bool = False) -> ExperimentResult:
    kind = BaselineKind.parse(kind) if isinstance(kind, str) else kind
    streams = streams if streams is not None else build_streams(cfg)
    b_cfg, flags, b_streams = baseline_setup(kind, cfg, streams)
    b_cfg = ExperimentConfig.from_dict({**b_cfg.to_dict(), "name": f"{cfg.name}-{kind.value}"})
    return run_experiment(b_cfg, flags, repeats, out_dir, streams=b_streams,
                          keep_learners=keep_learners)
