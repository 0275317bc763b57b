import logging
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spkcon.contrastive import (UNLABELED, Batch, LossConfig, NegativeQueue, moco_loss, queue_push,
                                semi_loss, simclr_loss, supcon_loss)
from spkcon.numerics import ContractError, Tensor

INSTANCES = range(100)


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _batch(a, b, labels=None, grad=False):
    return Batch(Tensor(a, requires_grad=grad), Tensor(b, requires_grad=grad), labels)


# ---------------------------------------------------------------- naive oracles

def naive_simclr(a, b, tau):
    n = len(a)
    allv = list(a) + list(b)
    total = 0.0
    for i in range(n):
        num = math.exp(float(a[i] @ b[i]) / tau)
        den = sum(math.exp(float(a[i] @ allv[j]) / tau) for j in range(2 * n) if j != i)
        total += -math.log(num / den)
    return total / n


def naive_moco(q, k, queue, tau):
    total = 0.0
    for i in range(len(q)):
        pos = math.exp(float(q[i] @ k[i]) / tau)
        den = pos + sum(math.exp(float(q[i] @ neg) / tau) for neg in queue)
        total += -math.log(pos / den)
    return total / len(q)


def naive_supcon(a, b, labels, tau):
    n = len(a)
    allv = list(a) + list(b)
    all_labels = list(labels) + list(labels)
    total = 0.0
    for i in range(n):
        den = sum(math.exp(float(a[i] @ allv[j]) / tau) for j in range(2 * n) if j != i)
        positives = [p for p in range(2 * n) if p != i and all_labels[p] == labels[i]]
        term = 0.0
        for p in positives:
            term += math.log(math.exp(float(a[i] @ allv[p]) / tau) / den)
        total += -term / len(positives)
    return total / n


def naive_semi(a, b, labels, queue, tau, lam):
    lab = [i for i in range(len(a)) if labels[i] != UNLABELED]
    sup = naive_supcon(a[lab], b[lab], [labels[i] for i in lab], tau) if lab else 0.0
    return sup + lam * naive_moco(a, b, queue, tau)


def _instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 17))
    k = int(rng.integers(0, 65))
    d = int(rng.integers(2, 12))
    tau = float(rng.uniform(0.05, 1.0))
    return rng, n, k, d, tau


# ---------------------------------------------------------------- oracle agreement

@pytest.mark.parametrize("seed", INSTANCES)
def test_simclr_matches_oracle(seed):
    rng, n, _, d, tau = _instance(seed)
    a, b = _unit(rng, n, d), _unit(rng, n, d)
    assert abs(simclr_loss(_batch(a, b), tau).item() - naive_simclr(a, b, tau)) < 1e-6


@pytest.mark.parametrize("seed", INSTANCES)
def test_moco_matches_oracle(seed):
    rng, n, k, d, tau = _instance(seed)
    q, kk, queue = _unit(rng, n, d), _unit(rng, n, d), _unit(rng, k, d)
    assert abs(moco_loss(Tensor(q), kk, queue, tau).item() - naive_moco(q, kk, queue, tau)) < 1e-6


@pytest.mark.parametrize("seed", INSTANCES)
def test_supcon_matches_oracle(seed):
    rng, n, _, d, tau = _instance(seed)
    a, b = _unit(rng, n, d), _unit(rng, n, d)
    labels = rng.integers(0, max(1, n // 2), size=n)
    got = supcon_loss(_batch(a, b, labels), tau).item()
    assert abs(got - naive_supcon(a, b, labels, tau)) < 1e-6


@pytest.mark.parametrize("seed", INSTANCES)
def test_semi_matches_oracle(seed):
    rng, n, k, d, tau = _instance(seed)
    a, b, queue = _unit(rng, n, d), _unit(rng, n, d), _unit(rng, k, d)
    labels = np.where(rng.random(n) < 0.4, rng.integers(0, 4, size=n), UNLABELED)
    cfg = LossConfig(tau=tau, semi_weight=float(rng.uniform(0, 10)))
    got = semi_loss(_batch(a, b, labels), queue, cfg).item()
    assert abs(got - naive_semi(a, b, labels, queue, tau, cfg.semi_weight)) < 1e-6


# ---------------------------------------------------------------- hand cases and reductions

def test_simclr_single_pair_is_zero():
    a = _unit(np.random.default_rng(0), 1, 5)
    assert simclr_loss(_batch(a, _unit(np.random.default_rng(1), 1, 5)), 0.1).item() == 0.0


def test_simclr_orthogonal_hand_case():
    # positives coincide, everything else orthogonal: -log(e / (e + 1 + 1))
    e = np.eye(2)
    got = simclr_loss(_batch(e, e.copy()), 1.0).item()
    assert got == pytest.approx(math.log((math.e + 2) / math.e), abs=1e-12)


def test_simclr_all_orthogonal():
    e = np.eye(4)
    assert simclr_loss(_batch(e[:2], e[2:]), 1.0).item() == pytest.approx(math.log(3), abs=1e-12)


def test_moco_uniform_scores():
    q = np.eye(6)[:2]
    k = np.eye(6)[2:4]
    queue = np.tile(np.eye(6)[5], (7, 1))
    assert moco_loss(Tensor(q), k, queue, 1.0).item() == pytest.approx(math.log(8), abs=1e-12)


def test_moco_closed_form():
    tau, K = 0.07, 10
    q = np.eye(3)[:1]
    queue = np.tile(np.eye(3)[1], (K, 1))
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + K))
    assert moco_loss(Tensor(q), q.copy(), queue, tau).item() == pytest.approx(expected, rel=1e-12)


def test_moco_empty_queue_is_positive_only():
    q = _unit(np.random.default_rng(2), 4, 6)
    assert moco_loss(Tensor(q), _unit(np.random.default_rng(3), 4, 6), np.zeros((0, 6)), 0.1).item() == 0.0


def test_supcon_identical_vectors():
    v = np.tile(_unit(np.random.default_rng(4), 1, 5), (2, 1))
    got = supcon_loss(_batch(v, v.copy(), [3, 3]), 0.1).item()
    assert got == pytest.approx(-math.log(1 / 3), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_supcon_distinct_labels_is_simclr(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 17))
    a, b = _unit(rng, n, 8), _unit(rng, n, 8)
    tau = float(rng.uniform(0.05, 1.0))
    s = supcon_loss(_batch(a, b, np.arange(n)), tau).item()
    assert abs(s - simclr_loss(_batch(a, b), tau).item()) <= 1e-6


def test_supcon_needs_labels():
    a = _unit(np.random.default_rng(5), 3, 4)
    with pytest.raises(ContractError):
        supcon_loss(_batch(a, a.copy()), 0.1)
    with pytest.raises(ContractError):
        supcon_loss(_batch(a, a.copy(), [0, UNLABELED, 1]), 0.1)


def test_semi_without_labels_is_scaled_moco(caplog):
    rng = np.random.default_rng(6)
    a, b, queue = _unit(rng, 8, 6), _unit(rng, 8, 6), _unit(rng, 20, 6)
    cfg = LossConfig(tau=0.2, semi_weight=9.0)
    with caplog.at_level(logging.WARNING):
        got = semi_loss(_batch(a, b, np.full(8, UNLABELED)), queue, cfg).item()
    assert got == 9.0 * moco_loss(Tensor(a), b, queue, 0.2).item()
    assert "no labeled" in caplog.text


def test_semi_lambda_zero_is_supcon():
    rng = np.random.default_rng(7)
    a, b, queue = _unit(rng, 8, 6), _unit(rng, 8, 6), _unit(rng, 20, 6)
    labels = rng.integers(0, 3, size=8)
    got = semi_loss(_batch(a, b, labels), queue, LossConfig(tau=0.2, semi_weight=0.0)).item()
    assert got == pytest.approx(supcon_loss(_batch(a, b, labels), 0.2).item(), abs=1e-12)


# ---------------------------------------------------------------- properties

@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_losses_non_negative(seed):
    rng, n, k, d, tau = _instance(seed)
    a, b = _unit(rng, n, d), _unit(rng, n, d)
    assert simclr_loss(_batch(a, b), tau).item() >= -1e-12
    assert moco_loss(Tensor(a), b, _unit(rng, k, d), tau).item() >= -1e-12
    assert supcon_loss(_batch(a, b, rng.integers(0, 3, size=n)), tau).item() >= -1e-12


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_simclr_permutation_invariant(seed):
    rng, n, _, d, tau = _instance(seed)
    a, b = _unit(rng, n, d), _unit(rng, n, d)
    p = rng.permutation(n)
    assert simclr_loss(_batch(a, b), tau).item() == pytest.approx(
        simclr_loss(_batch(a[p], b[p]), tau).item(), abs=1e-9)


def test_moco_gradient_only_through_queries():
    rng = np.random.default_rng(8)
    q = Tensor(_unit(rng, 4, 6), requires_grad=True)
    k = Tensor(_unit(rng, 4, 6), requires_grad=True)
    moco_loss(q, k, _unit(rng, 10, 6), 0.1).backward()
    assert q.grad is not None and np.abs(q.grad).max() > 0
    assert k.grad is None or not k.grad.any()


def test_semi_supcon_part_does_not_reach_keys():
    rng = np.random.default_rng(9)
    a = Tensor(_unit(rng, 6, 5), requires_grad=True)
    b = Tensor(_unit(rng, 6, 5), requires_grad=True)
    semi_loss(Batch(a, b, np.array([0, 0, 1, 1, UNLABELED, UNLABELED])), _unit(rng, 5, 5), LossConfig()).backward()
    assert b.grad is None or not b.grad.any()


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(tau=0.0)
    with pytest.raises(ContractError):
        LossConfig(semi_weight=-1.0)


def test_batch_shape_contract():
    with pytest.raises(ContractError):
        _batch(np.zeros((3, 4)), np.zeros((2, 4)))
    with pytest.raises(ContractError):
        _batch(np.zeros((3, 4)), np.zeros((3, 4)), [1, 2])


# ---------------------------------------------------------------- queue state machine

class TestQueue:
    def test_fifo_example(self):
        e = np.eye(5)
        q = NegativeQueue(4, 5, dtype=np.float64)
        queue_push(q, e[:3])
        queue_push(q, e[3:5])
        np.testing.assert_array_equal(q.contents(), e[1:5])

    def test_oversized_push_keeps_tail(self):
        e = np.eye(6)
        q = NegativeQueue(4, 6, dtype=np.float64)
        q.push(e)
        np.testing.assert_array_equal(q.contents(), e[2:])
        assert len(q) == 4

    def test_rejects_non_unit(self):
        q = NegativeQueue(4, 3)
        with pytest.raises(ContractError, match="unit-norm"):
            q.push(np.array([[1.0, 1.0, 0.0]]))
        assert len(q) == 0

    def test_rejects_wrong_dim(self):
        with pytest.raises(ContractError):
            NegativeQueue(4, 3).push(np.eye(4))

    def test_randomized_against_deque(self):
        rng = np.random.default_rng(10)
        cap, d = 37, 4
        q = NegativeQueue(cap, d, dtype=np.float64)
        model = deque(maxlen=cap)
        for _ in range(1000):
            keys = _unit(rng, int(rng.integers(1, 50)), d)
            q.push(keys)
            model.extend(keys)
            assert len(q) == len(model) <= cap
        np.testing.assert_array_equal(q.contents(), np.array(model))
        assert np.allclose(np.linalg.norm(q.contents(), axis=1), 1.0, atol=1e-5)
