"""Episodic memories kept by reservoir sampling, with per-class budgets."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)


class ReplayUnavailable(LookupError):
    """The memory is empty; callers drop the replay terms for this step."""


@dataclass
class MemoryEntry:
    input: torch.Tensor
    label: int
    stored_logits: torch.Tensor
    task_of_origin: int
    domain_tag: int


@dataclass
class MemoryBatch:
    inputs: torch.Tensor
    labels: torch.Tensor
    stored_logits: torch.Tensor
    tasks: torch.Tensor
    domain_tags: torch.Tensor

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def stack(cls, entries: Sequence[MemoryEntry]) -> "MemoryBatch":
        return cls(torch.stack([e.input for e in entries]),
                   torch.tensor([e.label for e in entries], dtype=torch.long),
                   torch.stack([e.stored_logits for e in entries]),
                   torch.tensor([e.task_of_origin for e in entries], dtype=torch.long),
                   torch.tensor([e.domain_tag for e in entries], dtype=torch.long))


class EpisodicMemory:
    """Bounded buffer; capacity grows by ``per_class`` for every new class."""

    def __init__(self, per_class: int = 50, capacity: int = 0, name: str = "M"):
        self.per_class = per_class
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []
        self.n_seen = 0
        self.name = name

    def __len__(self):
        return len(self.entries)

    def grow(self, n_new_classes: int):
        self.capacity += self.per_class * n_new_classes

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def all(self) -> MemoryBatch:
        if not self.entries:
            raise ReplayUnavailable(f"{self.name} is empty")
        return MemoryBatch.stack(self.entries)

    def state_dict(self) -> dict:
        return {"per_class": self.per_class, "capacity": self.capacity, "n_seen": self.n_seen,
                "name": self.name,
                "entries": [(e.input, e.label, e.stored_logits, e.task_of_origin, e.domain_tag)
                            for e in self.entries]}

    def load_state_dict(self, state: dict):
        self.per_class = state["per_class"]
        self.capacity = state["capacity"]
        self.n_seen = state["n_seen"]
        self.name = state["name"]
        self.entries = [MemoryEntry(*e) for e in state["entries"]]


def reservoir_insert(mem: EpisodicMemory, entry: MemoryEntry, rng: np.random.Generator) -> None:
    mem.n_seen += 1
    if len(mem.entries) < mem.capacity:
        mem.entries.append(entry)
        return
    j = int(rng.random() * mem.n_seen)
    if j < mem.capacity:
        mem.entries[j] = entry


def sample_batch(mem: EpisodicMemory, batch_size: int, rng: np.random.Generator) -> list[MemoryEntry]:
    """Uniform draw; with replacement only when the memory is smaller than the batch."""
    n = len(mem.entries)
    if n == 0:
        raise ReplayUnavailable(f"{mem.name} is empty")
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    return [mem.entries[i] for i in idx]


def _class_balanced(labels: np.ndarray, classes: Sequence[int], per_class: int,
                    rng: np.random.Generator) -> np.ndarray:
    picks = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx):
            picks.append(rng.choice(idx, size=min(per_class, len(idx)), replace=False))
    return np.sort(np.concatenate(picks)) if picks else np.array([], dtype=np.int64)


@torch.no_grad()
def _logits(net, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was = net.training
    net.eval()
    out = torch.cat([net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    net.train(was)
    return out


def fill_from_task(mem: EpisodicMemory, x: torch.Tensor, y: np.ndarray, classes: Sequence[int],
                   task_index: int, domain_tag: int, net, rng: np.random.Generator) -> int:
    """Grow capacity for ``classes`` and reservoir-insert a class-balanced draw."""
    mem.grow(len(classes))
    pick = _class_balanced(np.asarray(y), classes, mem.per_class, rng)
    if len(pick) == 0:
        return 0
    sel = torch.from_numpy(pick)
    xs = x[sel]
    h = _logits(net, xs)
    for xi, yi, hi in zip(xs, np.asarray(y)[pick], h):
        reservoir_insert(mem, MemoryEntry(xi.clone(), int(yi), hi.clone(), task_index, domain_tag), rng)
    return len(pick)


def end_of_task_update(mem_s: EpisodicMemory | None, mem_t: EpisodicMemory | None,
                       source_task: tuple[torch.Tensor, np.ndarray],
                       pseudo_labeled_target: tuple[torch.Tensor, np.ndarray],
                       bundle, classes: Sequence[int], task_index: int,
                       rng: np.random.Generator) -> None:
    """Insert exemplars of the finished task into both memories.

    Stored logits come from the current (end-of-task) network. Target entries
    carry pseudo labels and are restricted to the task's own classes.
    """
    if mem_s is not None:
        fill_from_task(mem_s, *source_task, classes, task_index, 1, bundle.net, rng)
    if mem_t is not None:
        x, y = pseudo_labeled_target
        n = fill_from_task(mem_t, x, y, classes, task_index, 0, bundle.net, rng) if len(x) else 0
        if n == 0:
            if len(x) == 0:
                mem_t.grow(len(classes))
            log.warning("task %d: no accepted pseudo labels; %s unchanged", task_index, mem_t.name)
