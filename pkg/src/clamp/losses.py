"""Meta-weighted replay losses and the domain-adversarial loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .memory import MemoryBatch

EPS = 1e-7


class TargetStageSkipped(LookupError):
    """Neither pseudo-labelled samples nor target memory are available."""


class DivergenceError(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    der: torch.Tensor
    distill: torch.Tensor
    domain: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ce", "der", "distill", "domain", "total")}


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return ref.new_zeros(())


def soft_cross_entropy(logits: torch.Tensor, target_logits: torch.Tensor,
                       temperature: float = 1.0) -> torch.Tensor:
    """Per-sample CE between softmax(target/T) and softmax(logits/T)."""
    p = F.softmax(target_logits / temperature, dim=1)
    return -(p * F.log_softmax(logits / temperature, dim=1)).sum(dim=1)


def meta_weighted_loss(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor,
                       mem_logits: torch.Tensor | None = None, mem_labels: torch.Tensor | None = None,
                       mem_stored: torch.Tensor | None = None, mem_weights: torch.Tensor | None = None,
                       temperature: float = 1.0) -> LossBreakdown:
    """Three-term loss shared by the source and target domains.

    ``weights``/``mem_weights`` are (N, 3) columns (alpha, beta, gamma).
    CE averages over current and memory samples together; the DER bracket
    (logit MSE + hard-label CE) and the distillation term average over memory.
    """
    ce_terms = [weights[:, 0] * F.cross_entropy(logits, labels, reduction="none")] if len(logits) else []
    ref = logits if len(logits) else mem_logits
    der = distill = _zero(ref)
    if mem_logits is not None and len(mem_logits):
        if mem_stored.shape != mem_logits.shape:
            raise ValueError(f"stored logits {tuple(mem_stored.shape)} do not match outputs "
                             f"{tuple(mem_logits.shape)}")
        mem_ce = F.cross_entropy(mem_logits, mem_labels, reduction="none")
        ce_terms.append(mem_weights[:, 0] * mem_ce)
        mse = ((mem_logits - mem_stored) ** 2).mean(dim=1)
        der = (mem_weights[:, 1] * (mse + mem_ce)).mean()
        distill = (mem_weights[:, 2] * soft_cross_entropy(mem_logits, mem_stored, temperature)).mean()
    ce = torch.cat(ce_terms).mean() if ce_terms else _zero(ref)
    return LossBreakdown(ce, der, distill, _zero(ref), ce + der + distill)


def _memory_forward(net, memory: MemoryBatch | None):
    if memory is None or len(memory) == 0:
        return None, None, None
    return net(memory.inputs), memory.labels, memory.stored_logits


def source_loss(net, current: tuple[torch.Tensor, torch.Tensor], memory: MemoryBatch | None,
                weights: torch.Tensor, mem_weights: torch.Tensor | None = None,
                temperature: float = 1.0) -> LossBreakdown:
    x, y = current
    mem_logits, mem_y, mem_h = _memory_forward(net, memory)
    return meta_weighted_loss(net(x), y, weights, mem_logits, mem_y, mem_h, mem_weights, temperature)


def target_loss(net, pseudo: tuple[torch.Tensor, torch.Tensor] | None, memory: MemoryBatch | None,
                weights: torch.Tensor | None, mem_weights: torch.Tensor | None = None,
                temperature: float = 1.0) -> LossBreakdown:
    """Same structure as :func:`source_loss` on pseudo labels and the target memory."""
    has_pseudo = pseudo is not None and len(pseudo[0]) > 0
    if not has_pseudo and (memory is None or len(memory) == 0):
        raise TargetStageSkipped("no pseudo-labelled samples and an empty target memory")
    if has_pseudo:
        return source_loss(net, pseudo, memory, weights, mem_weights, temperature)
    mem_logits, mem_y, mem_h = _memory_forward(net, memory)
    empty = mem_logits[:0]
    return meta_weighted_loss(empty, mem_y[:0], mem_weights[:0], mem_logits, mem_y, mem_h,
                              mem_weights, temperature)


def domain_loss(source_scores: torch.Tensor, target_scores: torch.Tensor) -> torch.Tensor:
    """Binary CE with d=1 for source and d=0 for target.

    Each half is averaged over its own count and the two halves are averaged,
    so maximal confusion (all scores 0.5) gives ln 2.
    """
    if len(source_scores) == 0 or len(target_scores) == 0:
        raise ValueError("both domain halves must be non-empty")
    s = source_scores.clamp(EPS, 1 - EPS)
    t = target_scores.clamp(EPS, 1 - EPS)
    return 0.5 * (-torch.log(s).mean() - torch.log(1 - t).mean())


def compose_overall(ls: float, lpa: float, lt: float) -> float:
    """Reported objective L_S - L_pa + L_T; optimisation itself is staged."""
    vals = (float(ls), float(lpa), float(lt))
    if not all(math.isfinite(v) for v in vals):
        raise DivergenceError(f"non-finite loss component (ls, lpa, lt) = {vals}")
    return vals[0] - vals[1] + vals[2]
