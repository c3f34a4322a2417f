from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deers.replay import ReplayMemory, SamplingError, Transition
from deers.session import DualState

EMPTY = DualState((), ())


def tagged(tag: int, reward: float = 1.0) -> Transition:
    return Transition(EMPTY, tag, reward, EMPTY)


def closed_form(priorities, beta, eps):
    w = (np.asarray(priorities, dtype=float) + eps) ** beta
    return w / w.sum()


def test_push_into_empty_memory():
    m = ReplayMemory(4)
    assert m.push(tagged(0)) == 0
    assert len(m) == 1 and m.priority(0) == 1.0


def test_ring_evicts_first_item():
    m = ReplayMemory(3)
    for tag in range(4):
        m.push(tagged(tag))
    assert len(m) == 3
    assert [t.action for t in m.oldest_first()] == [1, 2, 3]


def test_new_item_takes_max_priority():
    m = ReplayMemory(10)
    for tag in range(3):
        m.push(tagged(tag))
    m.update_priorities([1], [7.0])
    slot = m.push(tagged(3))
    assert m.priority(slot) == 7.0


def test_two_item_probabilities():
    m = ReplayMemory(4, priority_exponent=1.0, priority_floor=1e-12)
    m.push(tagged(0))
    m.push(tagged(1))
    m.update_priorities([0, 1], [3.0, 1.0])
    np.testing.assert_allclose(m.probabilities(), [0.75, 0.25], atol=1e-12)


def test_beta_zero_is_uniform():
    m = ReplayMemory(8, priority_exponent=0.0)
    for tag in range(5):
        m.push(tagged(tag))
    m.update_priorities(range(5), [0.0, 1.0, 10.0, 100.0, 3.5])
    np.testing.assert_allclose(m.probabilities(), np.full(5, 0.2), atol=1e-15)


def test_empirical_frequencies():
    prios = [0.5, 1.0, 2.0, 4.0, 0.0]
    m = ReplayMemory(5)
    for tag in range(5):
        m.push(tagged(tag))
    m.update_priorities(range(5), prios)
    draws = np.array([i for i, _ in m.sample(100_000, seed=3)])
    freq = np.bincount(draws, minlength=5) / len(draws)
    np.testing.assert_allclose(freq, closed_form(prios, 0.6, 0.01), atol=0.02)


def test_sample_is_deterministic_given_seed():
    m = ReplayMemory(20)
    for tag in range(20):
        m.push(tagged(tag))
    m.update_priorities(range(20), np.arange(20) / 3)
    assert m.sample(32, seed=11) == m.sample(32, seed=11)


def test_zero_td_still_sampleable():
    m = ReplayMemory(4)
    m.push(tagged(0))
    m.push(tagged(1))
    m.update_priorities([0], [0.0])
    assert m.priority(0) == 0.0
    assert m.probabilities()[0] > 0


def test_negative_td_stored_as_magnitude():
    m = ReplayMemory(4)
    m.push(tagged(0))
    m.update_priorities([0], [-2.5])
    assert m.priority(0) == 2.5


def test_tripled_priority_triples_probability():
    m = ReplayMemory(4, priority_exponent=1.0, priority_floor=1e-12)
    m.push(tagged(0))
    m.push(tagged(1))
    m.update_priorities([0, 1], [2.0, 2.0])
    before = m.probabilities()[0]
    m.update_priorities([0], [6.0])
    p = m.probabilities()
    assert p[0] / p[1] == pytest.approx(3.0, rel=1e-9)
    assert before == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 30),
    st.integers(0, 60),
    st.lists(st.floats(0, 1e3, allow_nan=False), min_size=0, max_size=60),
    st.floats(0, 2),
)
def test_probabilities_sum_to_one(capacity, pushes, tds, beta):
    m = ReplayMemory(capacity, priority_exponent=beta)
    for tag in range(pushes):
        m.push(tagged(tag))
    if len(m):
        k = min(len(tds), len(m))
        m.update_priorities(range(k), tds[:k])
        assert abs(m.probabilities().sum() - 1.0) <= 1e-12
        assert all(0 <= i < len(m) for i, _ in m.sample(50, seed=0))
    assert len(m) == min(capacity, pushes)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(0, 40))
def test_fifo_order(capacity, pushes):
    m = ReplayMemory(capacity)
    for tag in range(pushes):
        m.push(tagged(tag))
    assert [t.action for t in m.oldest_first()] == list(range(max(0, pushes - capacity), pushes))


def test_errors():
    m = ReplayMemory(4)
    with pytest.raises(SamplingError):
        m.sample(1, seed=0)
    m.push(tagged(0))
    with pytest.raises(IndexError):
        m.update_priorities([1], [1.0])
    with pytest.raises(IndexError):
        m.priority(3)
    with pytest.raises(ValueError):
        ReplayMemory(0)
    with pytest.raises(ValueError):
        ReplayMemory(4, priority_floor=0.0)


def test_debug_dump(tmp_path):
    m = ReplayMemory(2)
    for tag in range(3):
        m.push(Transition(DualState((1,), (2,)), tag, 5.0, DualState((tag,), (2,)), competitor=9))
    m.update_priorities([0], [-4.0])
    path = tmp_path / "replay.jsonl"
    m.dump(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["action"] for r in rows] == [1, 2]
    assert rows[1]["priority"] == 4.0 and rows[0]["competitor"] == 9
