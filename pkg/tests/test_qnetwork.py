from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deers.catalog import Catalog
from deers.gradcheck import compare_gradients, numerical_gradient
from deers.qnetwork import (
    Architecture,
    ConfigError,
    Hyperparameters,
    NetworkParameters,
    QVariant,
    TDBatch,
    TrainingAborted,
    apply_update,
    forward,
    init_parameters,
    layout,
    loss_and_gradient,
    q_value,
    q_values,
    sync_target,
    td_loss,
    td_loss_terms,
    td_target,
    td_targets,
)
from deers.replay import Transition
from deers.session import DualState

from conftest import make_catalog, random_state
from oracles import readout_params, straight_line_q

SMALL = Architecture(embedding_dim=3, hidden_dim=4, window=3, stream_widths=(4, 4, 4), joint_widths=(4,))


def tiny_catalog(seed=0, n=8, d=3):
    rng = np.random.default_rng(seed)
    return Catalog(np.arange(n), np.arange(n) % 3, rng.normal(size=(n, d)))


def jittered(arch, variant, seed, scale=0.2):
    p = init_parameters(arch, variant, seed)
    rng = np.random.default_rng(seed + 1)
    return p.with_flat(p.flat() + rng.normal(scale=scale, size=p.size))


def random_batch(rng, n_items, window, B=4, competitor_rate=0.5):
    return TDBatch(
        rng.integers(0, n_items + 1, size=(B, window)),
        rng.integers(0, n_items + 1, size=(B, window)),
        rng.integers(1, n_items + 1, size=B),
        np.where(rng.random(B) < competitor_rate, rng.integers(1, n_items + 1, size=B), -1),
        rng.uniform(-1, 1, size=B),
    )


def test_layout_depths():
    shapes = layout(Architecture(), QVariant.DEERS)
    assert [n for n in shapes if n.startswith("pos.") and n.endswith(".W")] == ["pos.0.W", "pos.1.W", "pos.2.W"]
    assert [n for n in shapes if n.startswith("joint.") and n.endswith(".W")] == ["joint.0.W", "joint.1.W"]
    assert shapes["pos.0.W"] == (64, 100)
    assert shapes["joint.0.W"] == (16, 32)
    assert shapes["joint.1.W"] == (1, 16)
    assert not any(n.startswith("neg") or n.startswith("gru_neg") for n in layout(Architecture(), QVariant.DEERS_P))
    assert layout(Architecture(), QVariant.DEERS_T)["pos.0.W"] == (64, 550)
    assert layout(Architecture(), QVariant.DEERS_F)["fc.0.W"] == (128, 150)


def test_init_is_glorot_uniform_with_zero_biases():
    p = init_parameters(Architecture(), QVariant.DEERS, 0)
    for name, arr in p.items():
        if arr.ndim == 1:
            assert not arr.any()
        else:
            assert np.abs(arr).max() <= math.sqrt(6.0 / sum(arr.shape))


def test_parameter_structure_validated():
    p = init_parameters(SMALL, QVariant.DEERS, 0)
    arrays = dict(p.arrays)
    arrays["joint.1.W"] = np.zeros((2, 4))
    with pytest.raises(ConfigError):
        NetworkParameters(SMALL, QVariant.DEERS, arrays)
    del arrays["joint.1.W"]
    with pytest.raises(ConfigError):
        NetworkParameters(SMALL, QVariant.DEERS, arrays)


@pytest.mark.parametrize("variant", list(QVariant))
def test_zero_network_outputs_zero(variant):
    cat = tiny_catalog()
    p = init_parameters(SMALL, variant, 0).zeros_like()
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert q_value(p, variant, random_state(rng, cat, 3), int(rng.integers(8)), cat) == 0.0


def test_identical_streams_give_identical_stream_outputs():
    cat = tiny_catalog()
    p = jittered(SMALL, QVariant.DEERS, 3)
    arrays = dict(p.arrays)
    for name in list(arrays):
        if name.startswith("neg.") or name.startswith("gru_neg."):
            arrays[name] = arrays[name.replace("neg", "pos", 1)].copy()
    p = NetworkParameters(SMALL, QVariant.DEERS, arrays)
    s = DualState((1, 4, 6), (1, 4, 6))
    pos, neg = cat.rows([s.positive]), cat.rows([s.negative])
    _, cache = forward(p, cat.embeddings, pos, neg, cat.rows([2]))
    joint_in = cache[-1][0][0]
    assert np.array_equal(joint_in[:, :4], joint_in[:, 4:])


@pytest.mark.parametrize("variant", list(QVariant))
def test_forward_matches_straight_line_transcription(variant):
    cat = tiny_catalog(1)
    rng = np.random.default_rng(2)
    p = jittered(SMALL, variant, 4, scale=0.5)
    for _ in range(10):
        s = random_state(rng, cat, 3)
        a = int(rng.integers(8))
        assert abs(q_value(p, variant, s, a, cat) - straight_line_q(p, s, a, cat)) <= 1e-12


def test_q_value_variant_and_lookup_errors():
    cat = tiny_catalog()
    p = init_parameters(SMALL, QVariant.DEERS, 0)
    with pytest.raises(ConfigError):
        q_value(p, QVariant.DEERS_P, DualState.empty(3), 1, cat)
    with pytest.raises(KeyError):
        q_value(p, QVariant.DEERS, DualState.empty(3), 99, cat)
    with pytest.raises(ConfigError):
        q_value(p, QVariant.DEERS, DualState.empty(4), 1, cat)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_positive_only_variant_ignores_negative_window(seed):
    cat = tiny_catalog(seed % 5)
    rng = np.random.default_rng(seed)
    p = jittered(SMALL, QVariant.DEERS_P, seed)
    s = random_state(rng, cat, 3)
    other = DualState(s.positive, tuple(int(i) for i in rng.integers(0, 8, size=3)))
    a = int(rng.integers(8))
    assert q_value(p, "deers-p", s, a, cat) == q_value(p, "deers-p", other, a, cat)


def test_td_target_examples():
    cat = Catalog([1, 2, 3, 4], [0, 0, 0, 0], [[0.2, 1.0], [-0.1, 1.0], [0.4, 1.0], [9.0, 1.0]])
    arch = Architecture(embedding_dim=2, hidden_dim=2, window=2, stream_widths=(3, 3, 3), joint_widths=(3,))
    stub = readout_params(arch, QVariant.DEERS, coord=0)
    s = DualState.empty(2)
    assert td_target(5, s, [], stub, 0.95, True, cat) == 5
    assert td_target(1, s, [1, 2, 3], stub, 0.0, False, cat) == 1
    assert td_target(1, s, [1, 2, 3], stub, 0.95, False, cat) == pytest.approx(1.38, abs=1e-12)
    with pytest.raises(ValueError):
        td_target(1, s, [], stub, 0.95, False, cat)


def test_batched_targets_match_single_targets():
    cat = make_catalog(n_items=10, dim=3)
    rng = np.random.default_rng(0)
    p = jittered(SMALL, QVariant.DEERS, 1)
    states = [random_state(rng, cat, 3) for _ in range(6)]
    cands = [tuple(sorted(set(int(i) for i in rng.integers(0, 10, size=rng.integers(1, 6))))) for _ in states]
    rewards = rng.choice([0.0, 1.0, 5.0], size=6)
    terminal = [False, True, False, False, True, False]
    y = td_targets(p, cat, rewards, states, cands, 0.95, terminal)
    for k in range(6):
        assert y[k] == pytest.approx(td_target(rewards[k], states[k], cands[k], p, 0.95, terminal[k], cat), abs=1e-12)


def test_alpha_zero_is_plain_td_loss():
    cat = tiny_catalog()
    rng = np.random.default_rng(0)
    p = jittered(SMALL, QVariant.DEERS, 0)
    for _ in range(20):
        b = random_batch(rng, 8, 3)
        loss, _, _ = td_loss_terms(p, b, 0.0, cat.embeddings)
        assert loss == td_loss(p, b, cat)


def test_stationary_point_singleton():
    cat = tiny_catalog()
    p = jittered(SMALL, QVariant.DEERS, 0)
    s = DualState((1, 2, 3), (4, 5, 6))
    y = q_value(p, "deers", s, 7, cat)
    t = Transition(s, 7, 1.0, s, None, False, (1,))
    loss, grad = loss_and_gradient(p, [(t, y)], 0.1, cat)
    assert loss == 0.0
    assert all(not g.any() for _, g in grad.items())


def test_negative_alpha_rejected():
    cat = tiny_catalog()
    p = init_parameters(SMALL, QVariant.DEERS, 0)
    with pytest.raises(ConfigError):
        td_loss_terms(p, random_batch(np.random.default_rng(0), 8, 3), -0.1, cat.embeddings)
    with pytest.raises(ConfigError):
        Hyperparameters(alpha=-1)


@pytest.mark.parametrize("alpha", [0.0, 0.1])
def test_gradient_matches_finite_differences_small(alpha):
    cat = tiny_catalog(2)
    rng = np.random.default_rng(11)
    p = jittered(SMALL, QVariant.DEERS, 5)
    b = random_batch(rng, 8, 3, competitor_rate=1.0)
    _, g, _ = td_loss_terms(p, b, alpha, cat.embeddings)
    num = numerical_gradient(lambda q: td_loss_terms(q, b, alpha, cat.embeddings, need_grad=False)[0], p)
    cmp = compare_gradients(g, num)
    assert cmp.passed, cmp


def test_alpha_zero_deers_equals_deers_r():
    cat = tiny_catalog()
    rng = np.random.default_rng(1)
    p = jittered(SMALL, QVariant.DEERS, 2)
    r = NetworkParameters(SMALL, QVariant.DEERS_R, {k: v.copy() for k, v in p.arrays.items()})
    b = random_batch(rng, 8, 3, competitor_rate=1.0)
    l1, g1, _ = td_loss_terms(p, b, 0.0, cat.embeddings)
    l2, g2, _ = td_loss_terms(r, b, QVariant.DEERS_R.effective_alpha(0.1), cat.embeddings)
    assert l1 == l2
    assert all(np.array_equal(g1[n], g2[n]) for n in g1.names())


def test_loss_is_mean_of_singletons_and_deterministic():
    cat = tiny_catalog()
    rng = np.random.default_rng(3)
    p = jittered(SMALL, QVariant.DEERS, 1)
    b = random_batch(rng, 8, 3, B=6)
    full, g1, _ = td_loss_terms(p, b, 0.1, cat.embeddings)
    singles = [
        td_loss_terms(p, TDBatch(b.pos_rows[k : k + 1], b.neg_rows[k : k + 1], b.act_rows[k : k + 1], b.comp_rows[k : k + 1], b.y[k : k + 1]), 0.1, cat.embeddings)[0]
        for k in range(6)
    ]
    assert full == pytest.approx(np.mean(singles), rel=1e-12, abs=1e-14)
    again, g2, _ = td_loss_terms(p, b, 0.1, cat.embeddings)
    assert again == full
    assert all(np.array_equal(g1[n], g2[n]) for n in g1.names())


def test_apply_update_examples():
    p = jittered(SMALL, QVariant.DEERS, 0)
    zero = p.zeros_like()
    same = apply_update(p, zero, 0.1, 5.0)
    assert all(np.array_equal(same[n], p[n]) for n in p.names())

    rng = np.random.default_rng(0)
    g = p.with_flat(rng.normal(size=p.size))
    g = g.with_flat(g.flat() * (10.0 / g.global_norm()))
    stepped = apply_update(p, g, 0.01, 1.0)
    assert np.linalg.norm(stepped.flat() - p.flat()) == pytest.approx(0.01, rel=1e-12)

    # single coordinate: theta=1, g=2, lr=0.1, clip=inf -> 0.8
    one = p.zeros_like()
    one.arrays["joint.1.b"][0] = 1.0
    grad = p.zeros_like()
    grad.arrays["joint.1.b"][0] = 2.0
    out = apply_update(one, grad, 0.1, math.inf)
    assert out["joint.1.b"][0] == pytest.approx(0.8, abs=1e-15)


def test_apply_update_aborts_on_non_finite():
    p = init_parameters(SMALL, QVariant.DEERS, 0)
    g = p.zeros_like()
    g.arrays["pos.0.W"][0, 0] = np.nan
    with pytest.raises(TrainingAborted, match="pos.0.W"):
        apply_update(p, g, 0.1)


def test_sync_target_isolation():
    cat = tiny_catalog()
    rng = np.random.default_rng(0)
    p = jittered(SMALL, QVariant.DEERS, 0)
    target = sync_target(p)
    probes = [(random_state(rng, cat, 3), int(rng.integers(8))) for _ in range(10)]
    assert all(q_value(p, "deers", s, a, cat) == q_value(target, "deers", s, a, cat) for s, a in probes)
    before = [q_value(target, "deers", s, a, cat) for s, a in probes]
    b = random_batch(rng, 8, 3)
    _, g, _ = td_loss_terms(p, b, 0.1, cat.embeddings)
    p2 = apply_update(p, g, 0.5)
    p.arrays["joint.1.b"][0] += 3.0
    assert [q_value(target, "deers", s, a, cat) for s, a in probes] == before
    assert any(q_value(p2, "deers", s, a, cat) != v for (s, a), v in zip(probes, before))
    t2 = sync_target(target)
    assert all(np.array_equal(t2[n], target[n]) for n in target.names())


def test_q_values_batch_matches_single():
    cat = tiny_catalog()
    p = jittered(SMALL, QVariant.DEERS_F, 0)
    s = DualState((1, 2, 3), (-1, 4, 5))
    many = q_values(p, s, range(8), cat)
    assert np.allclose(many, [q_value(p, "deers-f", s, a, cat) for a in range(8)], rtol=0, atol=1e-13)
