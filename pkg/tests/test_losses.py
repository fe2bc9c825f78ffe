import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from clamp.losses import (DivergenceError, TargetStageSkipped, compose_overall, domain_loss,
                          meta_weighted_loss, soft_cross_entropy, source_loss, target_loss)
from clamp.memory import MemoryBatch


def _mem(n, m=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 2, generator=g)
    return MemoryBatch(x, torch.randint(0, m, (n,), generator=g), torch.randn(n, m, generator=g),
                       torch.ones(n, dtype=torch.long), torch.ones(n, dtype=torch.long))


class Linear(torch.nn.Module):
    def __init__(self, m=3):
        super().__init__()
        torch.manual_seed(0)
        self.fc = torch.nn.Linear(2, m)

    def forward(self, x):
        return self.fc(x)


def test_uniform_logits_give_log_m():
    for m in (2, 10, 31):
        logits = torch.zeros(5, m)
        out = meta_weighted_loss(logits, torch.arange(5) % m, torch.ones(5, 3))
        assert out.ce.item() == pytest.approx(math.log(m), abs=1e-6)
        assert out.der.item() == 0 and out.distill.item() == 0


def test_domain_loss_values():
    half = torch.full((4,), 0.5)
    assert domain_loss(half, half[:3]).item() == pytest.approx(math.log(2), abs=1e-7)
    near = domain_loss(torch.ones(3), torch.zeros(2)).item()
    assert near < 1e-6
    mixed = domain_loss(torch.tensor([0.8, 0.6]), torch.tensor([0.3])).item()
    per_half_sum = -0.5 * (math.log(0.8) + math.log(0.6)) - math.log(0.7)
    assert mixed == pytest.approx(0.5 * per_half_sum, abs=1e-6)
    with pytest.raises(ValueError):
        domain_loss(half, half[:0])


def test_alpha_only_weights_reduce_to_plain_ce():
    net = Linear()
    torch.manual_seed(1)
    x, y = torch.randn(6, 2), torch.randint(0, 3, (6,))
    mem = _mem(4)
    w = torch.tensor([[1.0, 0.0, 0.0]]).repeat(6, 1)
    wm = torch.tensor([[1.0, 0.0, 0.0]]).repeat(4, 1)
    out = source_loss(net, (x, y), mem, w, wm)
    plain = F.cross_entropy(torch.cat([net(x), net(mem.inputs)]), torch.cat([y, mem.labels]))
    assert abs(out.total.item() - plain.item()) < 1e-6
    tl = target_loss(net, (x, y), mem, w, wm)
    assert torch.equal(tl.total, out.total)


def test_alpha_only_in_double_precision():
    with torch.no_grad():
        logits = torch.randn(8, 5, dtype=torch.float64)
    y = torch.arange(8) % 5
    out = meta_weighted_loss(logits, y, torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64).repeat(8, 1))
    assert abs(out.total.item() - F.cross_entropy(logits, y).item()) < 1e-9


def test_three_class_hand_oracle():
    # stored logits equal current ones, confident and correct
    o = torch.tensor([[10.0, 0.0, 0.0]], dtype=torch.float64)
    y = torch.tensor([0])
    w = torch.ones(1, 3, dtype=torch.float64)
    out = meta_weighted_loss(o[:0], y[:0], w[:0], o, y, o.clone(), w)
    p0 = 1.0 / (1.0 + 2.0 * math.exp(-10.0))
    ce = -math.log(p0)
    q = [p0, math.exp(-10) * p0, math.exp(-10) * p0]
    entropy = -sum(v * math.log(v) for v in q)
    assert out.der.item() == pytest.approx(ce, rel=1e-9)
    assert out.distill.item() == pytest.approx(entropy, rel=1e-9)
    assert out.ce.item() == pytest.approx(ce, rel=1e-9)


def test_zero_target_weights_give_zero_loss():
    net = Linear()
    x, y = torch.randn(5, 2), torch.randint(0, 3, (5,))
    out = target_loss(net, (x, y), _mem(3), torch.zeros(5, 3), torch.zeros(3, 3))
    assert out.total.item() == 0.0


def test_target_loss_skip_and_memory_only():
    net = Linear()
    with pytest.raises(TargetStageSkipped):
        target_loss(net, None, None, None)
    mem = _mem(4)
    out = target_loss(net, None, mem, None, torch.ones(4, 3))
    mo = net(mem.inputs)
    expected_ce = F.cross_entropy(mo, mem.labels)
    assert out.ce.item() == pytest.approx(expected_ce.item(), rel=1e-6)
    assert out.der.item() > 0


def test_stored_logit_shape_mismatch():
    with pytest.raises(ValueError, match="stored logits"):
        meta_weighted_loss(torch.zeros(2, 3), torch.zeros(2, dtype=torch.long), torch.ones(2, 3),
                           torch.zeros(2, 3), torch.zeros(2, dtype=torch.long), torch.zeros(2, 4),
                           torch.ones(2, 3))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**16))
def test_permutation_invariance(n, nm, seed):
    g = torch.Generator().manual_seed(seed)
    logits, y = torch.randn(n, 4, generator=g), torch.randint(0, 4, (n,), generator=g)
    w, wm = torch.rand(n, 3, generator=g), torch.rand(nm, 3, generator=g)
    ml, my, mh = torch.randn(nm, 4, generator=g), torch.randint(0, 4, (nm,), generator=g), torch.randn(nm, 4, generator=g)
    a = meta_weighted_loss(logits, y, w, ml, my, mh, wm)
    p, q = torch.randperm(n, generator=g), torch.randperm(nm, generator=g)
    b = meta_weighted_loss(logits[p], y[p], w[p], ml[q], my[q], mh[q], wm[q])
    assert torch.allclose(a.total, b.total, atol=1e-6)


@given(st.integers(0, 2**16), st.integers(0, 2), st.floats(0.0, 0.9))
def test_monotone_in_each_weight(seed, column, bump):
    g = torch.Generator().manual_seed(seed)
    n = 4
    logits, y = torch.randn(n, 3, generator=g), torch.randint(0, 3, (n,), generator=g)
    ml, my, mh = torch.randn(n, 3, generator=g), torch.randint(0, 3, (n,), generator=g), torch.randn(n, 3, generator=g)
    w, wm = torch.rand(n, 3, generator=g) * 0.1, torch.rand(n, 3, generator=g) * 0.1
    a = meta_weighted_loss(logits, y, w, ml, my, mh, wm)
    wm2 = wm.clone()
    wm2[0, column] += bump
    b = meta_weighted_loss(logits, y, w, ml, my, mh, wm2)
    name = ("ce", "der", "distill")[column]
    assert getattr(b, name).item() >= getattr(a, name).item() - 1e-7


def test_soft_ce_of_itself_is_entropy():
    a = torch.tensor([[1.0, 2.0, 3.0]])
    p = torch.softmax(a, dim=1)
    assert soft_cross_entropy(a, a).item() == pytest.approx(-(p * p.log()).sum().item(), rel=1e-6)
    # very high temperature flattens both sides toward uniform
    assert soft_cross_entropy(a, a, 1e4).item() == pytest.approx(math.log(3), rel=1e-4)


def test_compose_overall():
    assert compose_overall(1.0, 0.5, 2.0) == 2.5
    assert compose_overall(1.0, 0.0, 2.0) == 3.0
    with pytest.raises(DivergenceError):
        compose_overall(float("nan"), 0.0, 0.0)
