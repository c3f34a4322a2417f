"""Offline reranking and online simulator evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from deers.catalog import Catalog, candidate_pool, ensure_index, known_initial_state
from deers.qnetwork import ConfigError, NetworkParameters, QVariant, forward
from deers.session import DualState, Session, transition

if TYPE_CHECKING:
    from deers.simulator import SimulatorModel


class EvaluationError(RuntimeError):
    pass


def average_precision(ranked_rewards: Sequence[float]) -> float:
    """Binary relevance (reward > 0); raises ValueError if nothing is relevant."""
    hits = 0
    total = 0.0
    for k, r in enumerate(ranked_rewards, start=1):
        if r > 0:
            hits += 1
            total += hits / k
    if hits == 0:
        raise ValueError("average precision undefined without a relevant item")
    return total / hits


def dcg_at_k(rewards: Sequence[float], k: int) -> float:
    return sum((2.0 ** r - 1.0) / math.log2(i + 2) for i, r in enumerate(list(rewards)[:k]))


def ndcg_at_k(ranked_rewards: Sequence[float], k: int = 40) -> float:
    """Exponential-gain NDCG against the reward-descending ideal ordering."""
    ideal = dcg_at_k(sorted(ranked_rewards, reverse=True), k)
    if ideal <= 0:
        raise ValueError("NDCG undefined without a positive reward")
    return dcg_at_k(ranked_rewards, k) / ideal


def _state_batch(params, state: DualState, catalog: Catalog):
    pos = catalog.rows(state.positive)[None]
    neg = catalog.rows(state.negative)[None]
    return pos, neg


def score_actions(params: NetworkParameters, state: DualState, actions: Sequence[int], catalog: Catalog) -> np.ndarray:
    pos, neg = _state_batch(params, state, catalog)
    out, _ = forward(params, catalog.embeddings, pos, neg, catalog.rows(actions), np.zeros(len(actions), dtype=np.int64))
    return out[:, 0]


def greedy(actions: Sequence[int], scores: np.ndarray) -> int:
    """Index of the best score; ties go to the smallest item id."""
    best = scores.max()
    tied = [k for k, s in enumerate(scores) if s == best]
    return min(tied, key=lambda k: actions[k])


def _rerank_events(session: Session, params: NetworkParameters, catalog: Catalog):
    state = known_initial_state(session, catalog, params.arch.window)
    remaining = list(session.events)
    order = []
    while remaining:
        items = [e.item_id for e in remaining]
        k = greedy(items, score_actions(params, state, items, catalog))
        ev = remaining.pop(k)
        order.append(ev)
        state = transition(state, ev.item_id, ev.reward)
    return order


def rerank_session(session: Session, params: NetworkParameters, variant, catalog: Catalog) -> list[int]:
    """Greedy within-session rerank, revealing each pick's logged reward."""
    if QVariant(variant) is not params.variant:
        raise ConfigError(f"parameters are for {params.variant.value}, not {QVariant(variant).value}")
    return [e.item_id for e in _rerank_events(session, params, catalog)]


@dataclass
class OfflineReport:
    session_ids: list[int]
    ap: list[float]
    ndcg: list[float]
    excluded: int
    k: int = 40

    @property
    def count(self) -> int:
        return len(self.ap)

    @property
    def map(self) -> float:
        return float(np.mean(self.ap))

    @property
    def mean_ndcg(self) -> float:
        return float(np.mean(self.ndcg))


def _score_sessions(ranked: dict[int, list[float]], k: int) -> OfflineReport:
    ids, aps, ndcgs, excluded = [], [], [], 0
    for sid in sorted(ranked):
        rewards = ranked[sid]
        if not any(r > 0 for r in rewards):
            excluded += 1
            continue
        ids.append(sid)
        aps.append(average_precision(rewards))
        ndcgs.append(ndcg_at_k(rewards, k))
    if not ids:
        raise EvaluationError("no evaluable sessions")
    return OfflineReport(ids, aps, ndcgs, excluded, k)


def offline_evaluate(sessions: Sequence[Session], params: NetworkParameters, variant, catalog: Catalog, k: int = 40) -> OfflineReport:
    """Rerank every session and score it; sessions without positives are excluded."""
    if QVariant(variant) is not params.variant:
        raise ConfigError(f"parameters are for {params.variant.value}, not {QVariant(variant).value}")
    known = [s for s in sessions if all(e.item_id in catalog for e in s.events)]
    ranked = {s.session_id: [e.reward for e in _rerank_events(s, params, catalog)] for s in known}
    return _score_sessions(ranked, k)


def random_offline_baseline(sessions: Sequence[Session], seed: int = 0, repeats: int = 20, k: int = 40) -> OfflineReport:
    """Scores of uniformly random orderings, averaged over ``repeats`` shuffles per session."""
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(repeats):
        ranked = {}
        for s in sessions:
            rewards = [e.reward for e in s.events]
            ranked[s.session_id] = [rewards[i] for i in rng.permutation(len(rewards))]
        reports.append(_score_sessions(ranked, k))
    first = reports[0]
    return OfflineReport(
        first.session_ids,
        list(np.mean([r.ap for r in reports], axis=0)),
        list(np.mean([r.ndcg for r in reports], axis=0)),
        first.excluded,
        k,
    )


@dataclass
class OnlineReport:
    rewards: list[float]
    session_length: int
    feedback_counts: dict[str, int] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def std(self) -> float:
        return float(np.std(self.rewards))


def online_evaluate(
    params: NetworkParameters,
    variant,
    simulator: "SimulatorModel | None",
    catalog: Catalog,
    T: int,
    M: int,
    seed: int = 0,
    initial_states: Sequence[DualState] | None = None,
    recall_k: int = 20,
    mode: str = "argmax",
) -> OnlineReport:
    """Roll out the greedy policy against the simulator for ``M`` sessions of ``T`` steps.

    Initial states are drawn (by ``seed``) from ``initial_states``; without a
    pool every session starts from empty windows.  Each session's feedback
    stream has its own generator, so a shorter rollout is a prefix of a
    longer one under the same seed.
    """
    from deers.simulator import simulate_feedback

    if simulator is None:
        raise ConfigError("online evaluation needs a trained simulator")
    if QVariant(variant) is not params.variant:
        raise ConfigError(f"parameters are for {params.variant.value}, not {QVariant(variant).value}")
    if T < 1 or M < 1:
        raise ConfigError("T and M must be positive")
    n = params.arch.window
    if simulator.params.arch.window != n:
        raise ConfigError("simulator and policy disagree on window length")
    catalog = ensure_index(catalog, recall_k)
    rng = np.random.default_rng([seed, 0])
    if initial_states:
        picks = rng.integers(0, len(initial_states), size=M)
        starts = [initial_states[i] for i in picks]
    else:
        starts = [DualState.empty(n)] * M
    totals = []
    counts = {"skip": 0, "click": 0, "order": 0}
    for m, state in enumerate(starts):
        fb_rng = np.random.default_rng([seed, 1, m])
        total = 0.0
        for _ in range(T):
            cands = candidate_pool(catalog, state.positive_items(), recall_k)
            a = cands[greedy(cands, score_actions(params, state, cands, catalog))]
            fb, r = simulate_feedback(simulator, state, a, catalog, mode=mode, seed=fb_rng)
            counts[fb.value] += 1
            total += r
            state = transition(state, a, r)
        totals.append(total)
    return OnlineReport(totals, T, counts)


def write_offline_report(path, report: OfflineReport) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "ap", f"ndcg@{report.k}"])
        for sid, ap, nd in zip(report.session_ids, report.ap, report.ndcg):
            w.writerow([sid, repr(ap), repr(nd)])


def write_online_report(path, report: OnlineReport) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["session", "accumulated_reward"])
        for k, r in enumerate(report.rewards):
            w.writerow([k, repr(r)])


def summary_table(rows: Sequence[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def write_plot_data(path, xs, ys, x_name="x", y_name="y") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{x_name},{y_name}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{x},{y!r}\n")
