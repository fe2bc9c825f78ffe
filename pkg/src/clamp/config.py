"""Experiment configuration: data, model and trainer settings plus ablation flags."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import ConfigurationError


@dataclass
class TrainerConfig:
    epochs: int = 20
    pa_epochs: int = 10
    n_inner: int = 1
    n_outer: int | None = None          # None: one pass over the task per epoch
    batch_size: int = 128
    outer_lr: float = 1e-3
    inner_lr: float = 1e-4
    adversarial_lr: float | None = None  # None: same as outer_lr
    grl_coeff: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pseudo_threshold: float = 0.85
    val_per_class: int = 2
    mem_per_class: int = 50
    temperature: float = 1.0
    noise_sigma: float = 0.1
    interleave_pa: bool = False
    literal_descending: bool = False
    relabel_target_memory: bool = False
    seed: int = 0
    eval_batch_size: int = 512
    checkpoint: bool = True

    def __post_init__(self):
        if self.pa_epochs > self.epochs:
            raise ConfigurationError(f"pa_epochs ({self.pa_epochs}) exceeds epochs ({self.epochs})")
        for name in ("outer_lr", "inner_lr"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.adversarial_lr is not None and self.adversarial_lr <= 0:
            raise ConfigurationError("adversarial_lr must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.n_inner < 0:
            raise ConfigurationError("batch_size and epochs must be >= 1, n_inner >= 0")
        if not 0 < self.pseudo_threshold < 1:
            raise ConfigurationError("pseudo_threshold must lie in (0, 1)")

    @property
    def adv_lr(self) -> float:
        return self.adversarial_lr if self.adversarial_lr is not None else self.outer_lr


@dataclass
class DataConfig:
    kind: str = "digits"                 # digits | synthetic | image_folder
    source: str = "mnist"
    target: str = "usps"
    resize: int = 28
    split_sizes: list[int] = field(default_factory=lambda: [2, 2, 2, 2, 2])
    data_dir: str | None = None
    download: bool = False
    class_perm_seed: int | None = None
    subsample: int | None = None         # cap on train/test samples per task
    # synthetic
    num_classes: int = 4
    samples_per_class: int = 100
    rotation_deg: float = 30.0
    offset: float = 1.0
    synthetic_seed: int = 7
    # image folders
    root: str | None = None
    class_names: list[str] | None = None
    test_fraction: float = 0.2
    max_per_class: int | None = None


@dataclass
class ModelConfig:
    backbone: str = "lenet_plus"
    feature_dim: int | None = None
    assessor_stage: str = "mlp"
    assessor_hidden: int = 256
    assessor_recurrent: int = 64
    assessor_head: int = 64


@dataclass
class ExperimentConfig:
    name: str = "clamp"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        def build(kind, part):
            part = dict(part or {})
            known = {f.name for f in dataclasses.fields(kind)}
            unknown = set(part) - known
            if unknown:
                raise ConfigurationError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
            return kind(**part)

        extra = set(doc) - {"name", "data", "model", "trainer"}
        if extra:
            raise ConfigurationError(f"unknown config sections: {sorted(extra)}")
        return cls(doc.get("name", "clamp"), build(DataConfig, doc.get("data")),
                   build(ModelConfig, doc.get("model")), build(TrainerConfig, doc.get("trainer")))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | os.PathLike):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def replace(self, **trainer_overrides) -> "ExperimentConfig":
        doc = self.to_dict()
        doc["trainer"].update(trainer_overrides)
        return ExperimentConfig.from_dict(doc)


FLAG_NAMES = ("pa", "pl", "meta", "r1", "r2")


@dataclass(frozen=True)
class AblationFlags:
    pa: bool = True     # process (adversarial) adaptation
    pl: bool = True     # pseudo labelling of the target domain
    meta: bool = True   # assessor meta-weights
    r1: bool = True     # replay of previous source tasks
    r2: bool = True     # replay of previous target tasks

    @classmethod
    def parse(cls, text: str) -> "AblationFlags":
        """``"pa,pl,meta"`` -> those on, the rest off; ``"none"`` or ``""`` -> all off."""
        names = {t.strip().lower() for t in text.split(",") if t.strip()} - {"none"}
        if "all" in names:
            return cls()
        bad = names - set(FLAG_NAMES)
        if bad:
            raise ConfigurationError(f"unknown flags {sorted(bad)}; choose from {FLAG_NAMES}")
        return cls(**{n: n in names for n in FLAG_NAMES})

    def label(self) -> str:
        on = [n for n in FLAG_NAMES if getattr(self, n)]
        return ",".join(on) if on else "none"


def _row(pa, pl, meta, r1, r2):
    return AblationFlags(pa, pl, meta, r1, r2)


ABLATION_ROWS: dict[str, AblationFlags] = {
    "Naive": _row(False, False, False, False, False),
    "PA": _row(True, False, False, False, False),
    "Baseline 1": _row(True, True, False, False, False),
    "Baseline 2": _row(True, True, True, False, False),
    "Baseline 3": _row(True, False, False, True, False),
    "Baseline 4": _row(True, True, False, True, False),
    "Baseline 5": _row(True, True, False, True, True),
    "CLAMP": _row(True, True, True, True, True),
}
