"""Bi-level machinery: validation sets, pseudo labels, assessor and base updates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .losses import DivergenceError, LossBreakdown, meta_weighted_loss
from .memory import MemoryBatch

log = logging.getLogger(__name__)

TRANSFORM_KINDS = ("image_invert", "gaussian_noise", "rgb_rand")


# ---------------------------------------------------------------------------
# source validation: random transforms

@dataclass(frozen=True)
class TransformSpec:
    kind: str
    noise_sigma: float = 0.1
    scale_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform {self.kind!r}")


DEFAULT_TRANSFORMS = tuple(TransformSpec(k) for k in TRANSFORM_KINDS)


def apply_transform(x: torch.Tensor, spec: TransformSpec, gen: torch.Generator) -> torch.Tensor:
    """Transform a batch of images in [0, 1]; output is clamped back to [0, 1].

    ``rgb_rand`` scales each channel of each image by an independent factor,
    which for one-channel digits is a random brightness change.
    """
    if spec.kind == "image_invert":
        out = 1.0 - x
    elif spec.kind == "gaussian_noise":
        out = x + spec.noise_sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    else:
        lo, hi = spec.scale_range
        shape = (x.shape[0], x.shape[1]) + (1,) * (x.dim() - 2)
        out = x * (lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=x.dtype))
    return out.clamp(0.0, 1.0)


def build_source_validation(x: torch.Tensor, y: torch.Tensor,
                            transforms: Sequence[TransformSpec] = DEFAULT_TRANSFORMS,
                            rng: np.random.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Each sample gets one randomly chosen transform; labels are copied."""
    rng = rng if rng is not None else np.random.default_rng(0)
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    choice = rng.integers(len(transforms), size=len(x))
    out = x.clone()
    for i, spec in enumerate(transforms):
        sel = torch.from_numpy(np.flatnonzero(choice == i))
        if len(sel):
            out[sel] = apply_transform(x[sel], spec, gen)
    return out, y.clone()


# ---------------------------------------------------------------------------
# pseudo labels

@dataclass(frozen=True)
class PseudoLabelConfig:
    threshold: float = 0.85

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("pseudo-label threshold must lie in (0, 1)")


@dataclass
class PseudoLabels:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __len__(self):
        return len(self.indices)


def pseudo_label_probs(probs: torch.Tensor, threshold: float) -> PseudoLabels:
    """Accept rows whose max probability reaches ``threshold``; ties go to the lowest class."""
    conf = probs.max(dim=1).values
    labels = (probs == conf.unsqueeze(1)).to(torch.int8).argmax(dim=1)
    keep = conf >= threshold
    idx = torch.nonzero(keep).flatten()
    return PseudoLabels(idx.numpy(), labels[idx].numpy().astype(np.int64), conf[idx].numpy())


@torch.no_grad()
def predict_proba(net, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was = net.training
    net.eval()
    out = torch.cat([torch.softmax(net(x[i:i + batch_size]), dim=1)
                     for i in range(0, len(x), batch_size)])
    net.train(was)
    return out


def pseudo_label(net, x: torch.Tensor, cfg: PseudoLabelConfig = PseudoLabelConfig(),
                 batch_size: int = 512) -> PseudoLabels:
    return pseudo_label_probs(predict_proba(net, x, batch_size), cfg.threshold)


# ---------------------------------------------------------------------------
# target validation: source samples the domain classifier cannot place

@dataclass(frozen=True)
class TargetValidationConfig:
    per_class: int = 2
    descending: bool = False   # True = literal "descending" ranking, for ablation

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")


def rank_by_domain_similarity(scores: np.ndarray, labels: np.ndarray, per_class: int,
                              descending: bool = False) -> np.ndarray:
    """Top ``per_class`` indices of each class by |score - 0.5| (ascending by default)."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    gap = np.abs(scores - 0.5)
    picks = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        key = -gap[idx] if descending else gap[idx]
        order = idx[np.argsort(key, kind="stable")]
        if len(order) < per_class:
            log.info("class %d has only %d candidates for target validation", c, len(order))
        picks.append(order[:per_class])
    return np.concatenate(picks) if picks else np.array([], dtype=np.int64)


@torch.no_grad()
def domain_scores(net, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was = net.training
    net.eval()
    out = torch.cat([net.domain_score(net.feature(x[i:i + batch_size]))
                     for i in range(0, len(x), batch_size)])
    net.train(was)
    return out


def select_target_validation(net, pool_x: torch.Tensor, pool_y: torch.Tensor,
                             cfg: TargetValidationConfig = TargetValidationConfig()) -> np.ndarray:
    """Indices into the source pool, class-balanced by construction."""
    scores = domain_scores(net, pool_x).numpy()
    return rank_by_domain_similarity(scores, np.asarray(pool_y), cfg.per_class, cfg.descending)


# ---------------------------------------------------------------------------
# bi-level updates

@dataclass
class MetaBatch:
    """Current-task part plus an optional memory part carrying stored logits."""
    x: torch.Tensor
    y: torch.Tensor
    memory: MemoryBatch | None = None

    def assessor_inputs(self) -> torch.Tensor:
        if self.memory is None or len(self.memory) == 0:
            return self.x
        return torch.cat([self.x, self.memory.inputs])

    def split(self, w: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        n = len(self.x)
        return w[:n], (w[n:] if self.memory is not None and len(self.memory) else None)


def weighted_loss_on(net, batch: MetaBatch, weights: torch.Tensor,
                     temperature: float = 1.0, logits=None, mem_logits=None) -> LossBreakdown:
    w_cur, w_mem = batch.split(weights)
    if logits is None:
        logits = net(batch.x)
    mem = batch.memory
    if mem is not None and len(mem):
        if mem_logits is None:
            mem_logits = net(mem.inputs)
        return meta_weighted_loss(logits, batch.y, w_cur, mem_logits, mem.labels,
                                  mem.stored_logits, w_mem, temperature)
    return meta_weighted_loss(logits, batch.y, w_cur, temperature=temperature)


def _check_finite(tensors, what: str):
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise DivergenceError(f"non-finite {what}")


def inner_update_assessor(assessor, val: MetaBatch, net, inner_lr: float = 1e-4,
                          steps: int = 1, temperature: float = 1.0):
    """First-order SGD on the assessor against the validation loss.

    Base outputs are computed once and detached; the gradient reaches the
    assessor only through the per-sample weights.
    """
    params = [p for p in assessor.parameters() if p.requires_grad]
    if not params:
        return assessor
    with torch.no_grad():
        logits = net(val.x)
        mem_logits = net(val.memory.inputs) if val.memory is not None and len(val.memory) else None
    inputs = val.assessor_inputs()
    for _ in range(steps):
        w = assessor(inputs, advance=False)
        loss = weighted_loss_on(net, val, w, temperature, logits, mem_logits).total
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        _check_finite(grads, "assessor gradient")
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p.sub_(inner_lr * g)
    return assessor


def make_base_optimizer(params, lr: float = 1e-3, momentum: float = 0.9,
                        weight_decay: float = 5e-4) -> torch.optim.Optimizer:
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def outer_update_base(bundle, optimizer: torch.optim.Optimizer, train: MetaBatch, assessor,
                      temperature: float = 1.0) -> LossBreakdown:
    """One optimizer step on (theta, phi) with weights from the updated assessor."""
    with torch.no_grad():
        w = assessor(train.assessor_inputs(), advance=True)
    loss = weighted_loss_on(bundle.net, train, w, temperature)
    if not torch.isfinite(loss.total):
        raise DivergenceError(f"non-finite base loss {loss.as_floats()}")
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    bundle.version += 1
    return loss


def meta_step(bundle, optimizer, assessor, train: MetaBatch, val: MetaBatch,
              inner_lr: float = 1e-4, inner_steps: int = 1, temperature: float = 1.0,
              meta: bool = True, probe: list | None = None) -> LossBreakdown:
    """Inner assessor update on ``val`` then one outer base step on ``train``.

    ``probe`` (if given) receives ``(version_at_inner, version_after_outer)``.
    """
    version_at_inner = bundle.version
    if meta and inner_steps > 0:
        inner_update_assessor(assessor, val, bundle.net, inner_lr, inner_steps, temperature)
    loss = outer_update_base(bundle, optimizer, train, assessor, temperature)
    if probe is not None:
        probe.append((version_at_inner, bundle.version))
    return loss


def finite_or_raise(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what}")
    return value
