"""One-epoch smoke runs of the image-folder benchmarks.

Without the real dataset a stand-in folder tree is generated with the
config's domain and class names, so the whole pipeline (loader, ResNet
backbones, ResNet-stage assessors, all three stages, replay) is exercised.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .config import AblationFlags, ExperimentConfig
from .trainer import Learner, build_streams


def write_standin_tree(root: str | os.PathLike, domains, class_names, per_class: int = 3,
                       size: int = 8, seed: int = 0) -> Path:
    from PIL import Image

    root = Path(root)
    rng = np.random.default_rng(seed)
    for dom in domains:
        for c in class_names:
            d = root / dom / c
            d.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                pixels = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
                Image.fromarray(pixels).save(d / f"{i}.png")
    return root


def smoke_config(cfg: ExperimentConfig, root: str | os.PathLike, resize: int = 64,
                 samples: int = 100) -> ExperimentConfig:
    doc = cfg.to_dict()
    doc["data"].update(root=str(root), resize=resize, subsample=samples)
    doc["trainer"].update(epochs=1, pa_epochs=0, interleave_pa=True, pseudo_threshold=1e-3,
                          checkpoint=False)
    return ExperimentConfig.from_dict(doc)


def run_smoke(config_path: str | os.PathLike, data_root: str | os.PathLike | None = None,
              tasks: int = 2, resize: int = 64, samples: int = 100) -> dict:
    """Train ``tasks`` tasks for one epoch each; returns the accuracy rows and stage trace.

    The pseudo-label threshold is lowered so the target stage runs on an
    untrained network.
    """
    cfg = ExperimentConfig.load(config_path)
    with tempfile.TemporaryDirectory() as tmp:
        root = data_root
        if root is None:
            names = cfg.data.class_names or [f"class_{i:03d}" for i in range(sum(cfg.data.split_sizes))]
            root = write_standin_tree(Path(tmp) / "data", (cfg.data.source, cfg.data.target),
                                      names, per_class=3)
        scfg = smoke_config(cfg, root, resize, samples)
        source, target = build_streams(scfg)
        learner = Learner(scfg, AblationFlags(), source, target, seed=scfg.trainer.seed)
        rows = [learner.run_task(k) for k in range(1, min(tasks, source.num_tasks) + 1)]
    return {"name": cfg.name, "rows": rows, "trace": learner.trace, "num_tasks": source.num_tasks,
            "input_shape": source.input_shape, "memory": (len(learner.mem_s), len(learner.mem_t))}
