from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deers.catalog import Catalog, build_neighbor_index
from deers.evaluator import (
    EvaluationError,
    average_precision,
    ndcg_at_k,
    offline_evaluate,
    online_evaluate,
    random_offline_baseline,
    rerank_session,
    write_offline_report,
    write_online_report,
)
from deers.qnetwork import Architecture, ConfigError, QVariant, init_parameters
from deers.simulator import SimulatorModel

from conftest import make_session
from oracles import brute_average_precision, brute_ndcg, readout_params

ARCH = Architecture(embedding_dim=4, hidden_dim=3, window=3, stream_widths=(6, 5, 4), joint_widths=(3,))
REWARD = {"skip": 0, "click": 1, "order": 5}


def reward_catalog(rewards_by_item: dict[int, int], seed=0) -> Catalog:
    """Embedding coordinate 0 holds each item's reward; the rest is noise."""
    rng = np.random.default_rng(seed)
    ids = sorted(rewards_by_item)
    emb = rng.normal(size=(len(ids), ARCH.embedding_dim))
    emb[:, 0] = [rewards_by_item[i] for i in ids]
    return build_neighbor_index(Catalog(ids, [i % 3 for i in ids], emb), 3)


def reward_corpus(n_sessions, n_items=30, length=8, seed=0):
    rng = np.random.default_rng(seed)
    fb = {i: str(rng.choice(["skip", "click", "order"], p=[0.5, 0.35, 0.15])) for i in range(n_items)}
    sessions = []
    for sid in range(n_sessions):
        items = rng.choice(n_items, size=length, replace=False)
        sessions.append(make_session(sid, items, items % 3, [fb[int(i)] for i in items]))
    return sessions, reward_catalog({i: REWARD[f] for i, f in fb.items()}, seed)


def constant_simulator(answer: int, window=ARCH.window) -> SimulatorModel:
    arch = Architecture(embedding_dim=ARCH.embedding_dim, hidden_dim=3, window=window, stream_widths=(4, 4, 4), joint_widths=(3,), output_dim=3)
    p = init_parameters(arch, QVariant.DEERS, 0).zeros_like()
    p.arrays["joint.1.b"][answer] = 10.0
    return SimulatorModel(p)


def test_average_precision_examples():
    assert average_precision([1, 0, 1]) == pytest.approx(0.8333333333333334, abs=1e-15)
    assert average_precision([5, 1, 1]) == 1.0
    assert average_precision([0, 0, 0, 1]) == 0.25
    with pytest.raises(ValueError):
        average_precision([0, 0])


def test_ndcg_examples():
    assert ndcg_at_k([5, 1, 0]) == 1.0
    assert ndcg_at_k([0, 5], k=40) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert ndcg_at_k([0, 5], k=40) == pytest.approx(0.6309, abs=1e-4)
    with pytest.raises(ValueError):
        ndcg_at_k([0, 0])


def test_ndcg_truncation():
    rewards = [0] * 40 + [5]
    assert ndcg_at_k(rewards, 40) == 0.0
    assert ndcg_at_k(rewards, 41) > 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 5]), min_size=1, max_size=7).filter(lambda r: any(r)))
def test_metrics_match_brute_force(rewards):
    assert abs(average_precision(rewards) - brute_average_precision(rewards)) <= 1e-12
    assert abs(ndcg_at_k(rewards) - brute_ndcg(rewards)) <= 1e-12


def test_one_item_session():
    sessions, cat = reward_corpus(1, length=1)
    p = init_parameters(ARCH, "deers", 0)
    assert rerank_session(sessions[0], p, "deers", cat) == [sessions[0].events[0].item_id]


def test_zero_network_sorts_by_id():
    sessions, cat = reward_corpus(3)
    zero = init_parameters(ARCH, "deers", 0).zeros_like()
    for s in sessions:
        assert rerank_session(s, zero, "deers", cat) == sorted(e.item_id for e in s.events)


@pytest.mark.parametrize("variant", list(QVariant))
def test_stub_network_orders_by_reward(variant):
    sessions, cat = reward_corpus(10)
    stub = readout_params(ARCH, variant)
    for s in sessions:
        got = rerank_session(s, stub, variant, cat)
        reward_of = {e.item_id: e.reward for e in s.events}
        expected = sorted(reward_of, key=lambda i: (-reward_of[i], i))
        assert got == expected
    report = offline_evaluate(sessions, stub, variant, cat)
    assert report.map == 1.0 and report.mean_ndcg == 1.0


def test_oracle_beats_random_network():
    for seed in range(50):
        sessions, cat = reward_corpus(6, seed=seed)
        oracle = offline_evaluate(sessions, readout_params(ARCH, QVariant.DEERS), "deers", cat)
        rnd = offline_evaluate(sessions, init_parameters(ARCH, "deers", seed), "deers", cat)
        assert oracle.map >= rnd.map
        assert oracle.map == 1.0


def test_excluded_and_empty():
    sessions, cat = reward_corpus(4)
    no_pos = make_session(99, [0, 1], [0, 1], ["skip", "skip"])
    cat2 = reward_catalog({i: 0 for i in range(30)})
    p = init_parameters(ARCH, "deers", 0)
    report = offline_evaluate([no_pos] + sessions, p, "deers", cat)
    assert report.excluded == 1 and report.count == 4
    with pytest.raises(EvaluationError, match="no evaluable sessions"):
        offline_evaluate([], p, "deers", cat)
    with pytest.raises(EvaluationError, match="no evaluable sessions"):
        offline_evaluate([no_pos], p, "deers", cat2)


def test_unknown_items():
    sessions, cat = reward_corpus(3)
    p = init_parameters(ARCH, "deers", 0)
    unknown = make_session(50, [1, 500], [0, 0], ["click", "skip"])
    cold = make_session(51, [1, 2], [1, 2], ["click", "skip"], initial=((700, 3), (800,)))
    report = offline_evaluate(sessions + [unknown, cold], p, "deers", cat)
    assert 50 not in report.session_ids and 51 in report.session_ids


def test_corpus_order_invariance():
    sessions, cat = reward_corpus(8, seed=4)
    p = init_parameters(ARCH, "deers", 1)
    a = offline_evaluate(sessions, p, "deers", cat)
    b = offline_evaluate(sessions[::-1], p, "deers", cat)
    assert a.map == b.map and a.mean_ndcg == b.mean_ndcg and a.session_ids == b.session_ids


def test_variant_mismatch():
    sessions, cat = reward_corpus(2)
    p = init_parameters(ARCH, "deers-p", 0)
    with pytest.raises(ConfigError):
        offline_evaluate(sessions, p, "deers", cat)
    with pytest.raises(ConfigError):
        rerank_session(sessions[0], p, "deers", cat)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(QVariant)))
def test_rerank_is_permutation(seed, variant):
    sessions, cat = reward_corpus(1, length=6, seed=seed % 50)
    p = init_parameters(ARCH, variant, seed)
    got = rerank_session(sessions[0], p, variant, cat)
    assert sorted(got) == sorted(e.item_id for e in sessions[0].events)


def test_random_baseline_deterministic():
    sessions, _ = reward_corpus(10)
    a = random_offline_baseline(sessions, seed=1)
    b = random_offline_baseline(sessions, seed=1)
    assert a.map == b.map and 0 < a.map < 1


def test_online_always_order():
    _, cat = reward_corpus(1)
    p = init_parameters(ARCH, "deers", 0)
    report = online_evaluate(p, "deers", constant_simulator(2), cat, T=1, M=4, seed=0)
    assert report.rewards == [5.0] * 4 and report.feedback_counts["order"] == 4


def test_online_always_skip():
    _, cat = reward_corpus(1)
    p = init_parameters(ARCH, "deers", 0)
    report = online_evaluate(p, "deers", constant_simulator(0), cat, T=20, M=3, seed=0)
    assert report.mean == 0.0


def test_online_longer_horizon_accumulates_more():
    sessions, cat = reward_corpus(5)
    p = init_parameters(ARCH, "deers", 2)
    sim = SimulatorModel(init_parameters(
        Architecture(embedding_dim=4, hidden_dim=3, window=3, stream_widths=(4, 4, 4), joint_widths=(3,), output_dim=3), "deers", 5))
    starts = [s.initial_state(3) for s in sessions]
    short = online_evaluate(p, "deers", sim, cat, T=100, M=5, seed=3, initial_states=starts, mode="sample")
    long = online_evaluate(p, "deers", sim, cat, T=300, M=5, seed=3, initial_states=starts, mode="sample")
    assert long.mean >= short.mean
    assert all(b >= a for a, b in zip(short.rewards, long.rewards))


def test_online_errors():
    _, cat = reward_corpus(1)
    p = init_parameters(ARCH, "deers", 0)
    with pytest.raises(ConfigError):
        online_evaluate(p, "deers", None, cat, T=1, M=1)
    with pytest.raises(ConfigError):
        online_evaluate(p, "deers", constant_simulator(1), cat, T=0, M=1)
    with pytest.raises(ConfigError):
        online_evaluate(p, "deers", constant_simulator(1, window=4), cat, T=1, M=1)
    with pytest.raises(ConfigError):
        online_evaluate(p, "deers-t", constant_simulator(1), cat, T=1, M=1)


def test_reports_written(tmp_path):
    sessions, cat = reward_corpus(3)
    p = init_parameters(ARCH, "deers", 0)
    write_offline_report(tmp_path / "off.csv", offline_evaluate(sessions, p, "deers", cat))
    assert (tmp_path / "off.csv").read_text().splitlines()[0] == "session_id,ap,ndcg@40"
    write_online_report(tmp_path / "on.csv", online_evaluate(p, "deers", constant_simulator(1), cat, T=2, M=2))
    assert (tmp_path / "on.csv").read_text().splitlines()[1:] == ["0,2.0", "1,2.0"]
