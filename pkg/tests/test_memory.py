import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from clamp.memory import (EpisodicMemory, MemoryBatch, MemoryEntry, ReplayUnavailable,
                          end_of_task_update, reservoir_insert, sample_batch)
from clamp.models import build_base


def _entry(i, label=0, m=4):
    return MemoryEntry(torch.full((2,), float(i)), label, torch.zeros(m), 1, 1)


def test_unfilled_reservoir_keeps_everything():
    mem = EpisodicMemory(per_class=5)
    mem.grow(1)
    rng = np.random.default_rng(0)
    for i in range(5):
        reservoir_insert(mem, _entry(i), rng)
    assert [int(e.input[0]) for e in mem.entries] == list(range(5))
    assert mem.n_seen == 5


@given(st.integers(0, 20), st.integers(0, 200), st.integers(0, 2**16))
def test_capacity_is_never_exceeded(capacity, inserts, seed):
    mem = EpisodicMemory(per_class=1, capacity=capacity)
    rng = np.random.default_rng(seed)
    seen = 0
    for i in range(inserts):
        reservoir_insert(mem, _entry(i), rng)
        assert len(mem) <= capacity
        assert mem.n_seen == seen + 1
        seen = mem.n_seen
    assert len(mem) == min(capacity, inserts)


def test_sample_batch_modes():
    mem = EpisodicMemory(per_class=10, capacity=6)
    rng = np.random.default_rng(1)
    for i in range(6):
        reservoir_insert(mem, _entry(i), rng)
    whole = sample_batch(mem, 6, rng)
    assert sorted(int(e.input[0]) for e in whole) == list(range(6))
    assert len(sample_batch(mem, 20, rng)) == 20
    with pytest.raises(ReplayUnavailable):
        sample_batch(EpisodicMemory(), 3, rng)
    with pytest.raises(ReplayUnavailable):
        EpisodicMemory().all()


def test_sampled_class_frequencies_match_composition():
    mem = EpisodicMemory(per_class=100, capacity=10)
    rng = np.random.default_rng(2)
    labels = [0, 0, 0, 0, 0, 1, 1, 1, 2, 2]
    for i, y in enumerate(labels):
        reservoir_insert(mem, _entry(i, y), rng)
    draws = [e.label for _ in range(1000) for e in sample_batch(mem, 10, rng)]
    observed = np.bincount(draws, minlength=3)
    expected = np.bincount(labels) / len(labels) * len(draws)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_end_of_task_update_budget_and_logit_capture(tiny_streams):
    src, tgt = tiny_streams
    bundle = build_base("mlp_plus", 4, (2,), seed=0)
    mem_s, mem_t = EpisodicMemory(50, name="M_S"), EpisodicMemory(50, name="M_T")
    rng = np.random.default_rng(0)
    for k in (1, 2):
        classes = src.task(k).class_labels
        x_t = tgt.inputs(k)
        fake_pseudo = np.array([classes[i % 2] for i in range(len(x_t))])
        end_of_task_update(mem_s, mem_t, (src.inputs(k), src.labels(k).numpy()),
                           (x_t, fake_pseudo), bundle, classes, k, rng)
        assert len(mem_s) <= 50 * 2 * k and len(mem_t) <= 50 * 2 * k
    assert mem_s.capacity == 200
    batch = mem_s.all()
    with torch.no_grad():
        bundle.net.eval()
        assert torch.equal(batch.stored_logits, bundle.net(batch.inputs))
    assert batch.stored_logits.shape[1] == 4 and torch.isfinite(batch.stored_logits).all()
    # labels identify the task of origin
    for e in mem_s.entries:
        assert e.label in src.task(e.task_of_origin).class_labels
    assert set(mem_t.all().domain_tags.tolist()) == {0}
    assert set(batch.domain_tags.tolist()) == {1}


def test_empty_pseudo_set_leaves_target_memory_unchanged(tiny_streams, caplog):
    src, _ = tiny_streams
    bundle = build_base("mlp_plus", 4, (2,), seed=0)
    mem_t = EpisodicMemory(10)
    end_of_task_update(None, mem_t, (src.inputs(1), src.labels(1).numpy()),
                       (src.inputs(1)[:0], np.zeros(0, dtype=np.int64)), bundle, (0, 1), 1,
                       np.random.default_rng(0))
    assert len(mem_t) == 0 and mem_t.capacity == 20
    assert "no accepted pseudo labels" in caplog.text


def test_state_round_trip():
    mem = EpisodicMemory(3, name="X")
    mem.grow(2)
    rng = np.random.default_rng(0)
    for i in range(9):
        reservoir_insert(mem, _entry(i, i % 2), rng)
    other = EpisodicMemory()
    other.load_state_dict(mem.state_dict())
    assert other.n_seen == 9 and other.capacity == 6 and other.name == "X"
    a, b = mem.all(), other.all()
    assert torch.equal(a.inputs, b.inputs) and torch.equal(a.labels, b.labels)
    assert isinstance(a, MemoryBatch) and len(a) == 6
