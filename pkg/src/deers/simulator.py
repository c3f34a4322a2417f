"""Learned user-feedback simulator used for online evaluation.

The model shares the dual-stream body of the Q-network; its last joint layer
has three outputs fed through a softmax over (skip, click, order).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import softmax

from deers.catalog import Catalog
from deers.qnetwork import (
    Architecture,
    ConfigError,
    NetworkParameters,
    QVariant,
    apply_update,
    backward,
    forward,
    init_parameters,
)
from deers.session import DEFAULT_REWARDS, FEEDBACK_CLASSES, DualState, Feedback, RewardMapping, Session

log = logging.getLogger(__name__)


class SplitOverlapError(ValueError):
    pass


@dataclass
class SplitManifest:
    """Session-id sets for the DEERS training, simulator, and evaluation splits."""

    train: set[int] = field(default_factory=set)
    simulator: set[int] = field(default_factory=set)
    evaluation: set[int] = field(default_factory=set)

    def check_disjoint(self) -> None:
        pairs = (("train", "simulator"), ("train", "evaluation"), ("simulator", "evaluation"))
        for a, b in pairs:
            common = getattr(self, a) & getattr(self, b)
            if common:
                raise SplitOverlapError(f"{a} and {b} splits share session ids, e.g. {sorted(common)[:3]}")

    def to_json(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("train", "simulator", "evaluation")}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitManifest":
        return cls(*(set(obj.get(k, ())) for k in ("train", "simulator", "evaluation")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def split_sessions(sessions: Sequence[Session], train_fraction: float = 0.7, simulator_share: float = 2 / 3):
    """Temporal split by ``session_id``: first 70% train; the rest is carved
    into a simulator split and an evaluation split."""
    ordered = sorted(sessions, key=lambda s: s.session_id)
    n_train = int(round(train_fraction * len(ordered)))
    rest = ordered[n_train:]
    n_sim = int(round(simulator_share * len(rest)))
    train, sim, ev = ordered[:n_train], rest[:n_sim], rest[n_sim:]
    manifest = SplitManifest(
        {s.session_id for s in train}, {s.session_id for s in sim}, {s.session_id for s in ev}
    )
    manifest.check_disjoint()
    return train, sim, ev, manifest


@dataclass(frozen=True)
class SimulatorConfig:
    arch: Architecture = field(default_factory=lambda: Architecture(output_dim=3))
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.05
    gradient_clip: float = 5.0
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.arch.output_dim != 3:
            object.__setattr__(self, "arch", replace(self.arch, output_dim=3))


@dataclass
class SimulatorModel:
    params: NetworkParameters
    rewards: RewardMapping = DEFAULT_REWARDS
    accuracy: float = float("nan")
    majority_rate: float = float("nan")
    per_class_precision: dict[str, float] = field(default_factory=dict)
    holdout_size: int = 0

    def probabilities(self, pos_rows, neg_rows, act_rows, E) -> np.ndarray:
        out, _ = forward(self.params, E, pos_rows, neg_rows, act_rows)
        return softmax(out, axis=1)

    def predict_proba(self, state: DualState, action: int, catalog: Catalog) -> np.ndarray:
        pos = catalog.rows(state.positive)[None]
        neg = catalog.rows(state.negative)[None]
        return self.probabilities(pos, neg, catalog.rows([action]), catalog.embeddings)[0]


def feedback_dataset(sessions: Sequence[Session], catalog: Catalog, window: int):
    """(pos_rows, neg_rows, act_rows, labels) for every known-item event."""
    pos, neg, act, lab = [], [], [], []
    for s in sessions:
        for state, ev, _ in s.states(window):
            if ev.item_id not in catalog:
                continue
            state_items = state.positive + state.negative
            if not all(i in catalog or i == catalog.padding_id for i in state_items):
                continue
            pos.append(state.positive)
            neg.append(state.negative)
            act.append(ev.item_id)
            lab.append(ev.feedback.index)
    if not act:
        raise ValueError("no usable events for simulator training")
    return (
        catalog.rows(pos).reshape(len(act), window),
        catalog.rows(neg).reshape(len(act), window),
        catalog.rows(act),
        np.asarray(lab, dtype=np.int64),
    )


def cross_entropy(params: NetworkParameters, E, pos, neg, act, labels, need_grad=True):
    out, cache = forward(params, E, pos, neg, act)
    p = softmax(out, axis=1)
    n = len(labels)
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300))))
    if not need_grad:
        return loss, None
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, backward(params, cache, d / n)


def classification_report(pred: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, float]]:
    acc = float(np.mean(pred == labels))
    prec = {}
    for k, fb in enumerate(FEEDBACK_CLASSES):
        chosen = pred == k
        prec[fb.value] = float(np.mean(labels[chosen] == k)) if chosen.any() else float("nan")
    return acc, prec


def train_simulator(
    sessions: Sequence[Session],
    catalog: Catalog,
    config: SimulatorConfig = SimulatorConfig(),
    manifest: SplitManifest | None = None,
    rewards: RewardMapping = DEFAULT_REWARDS,
) -> SimulatorModel:
    """Fit the softmax feedback head by minibatch SGD on cross-entropy.

    A ``holdout_fraction`` of the sessions is kept aside to report accuracy
    and per-class precision.  With a ``manifest``, every session must belong
    to its simulator split and none to its training split.
    """
    sessions = list(sessions)
    if manifest is not None:
        manifest.check_disjoint()
        ids = {s.session_id for s in sessions}
        if ids & manifest.train:
            raise SplitOverlapError("simulator sessions overlap the DEERS training split")
        if not ids <= manifest.simulator:
            raise SplitOverlapError("simulator sessions fall outside the simulator split")
    if catalog.dim != config.arch.embedding_dim:
        raise ConfigError(f"catalog dim {catalog.dim} != simulator embedding_dim {config.arch.embedding_dim}")
    rng = np.random.default_rng([config.seed, 2])
    order = sorted(sessions, key=lambda s: s.session_id)
    n_hold = int(round(config.holdout_fraction * len(order)))
    fit, hold = (order[:-n_hold], order[-n_hold:]) if n_hold else (order, [])
    window = config.arch.window
    pos, neg, act, lab = feedback_dataset(fit, catalog, window)
    E = catalog.embeddings
    params = init_parameters(config.arch, QVariant.DEERS, config.seed)
    n = len(lab)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            b = perm[start : start + config.batch_size]
            loss, grad = cross_entropy(params, E, pos[b], neg[b], act[b], lab[b])
            params = apply_update(params, grad, config.learning_rate, config.gradient_clip)
            total += loss * len(b)
        log.info("simulator epoch %d cross-entropy %.4f", epoch + 1, total / n)

    model = SimulatorModel(params, rewards)
    eval_set = hold if hold else fit
    hp, hn, ha, hl = feedback_dataset(eval_set, catalog, window)
    pred = np.argmax(model.probabilities(hp, hn, ha, E), axis=1)
    model.accuracy, model.per_class_precision = classification_report(pred, hl)
    # baseline: always answer the most frequent training class, scored on the same examples
    majority = int(np.argmax(np.bincount(lab, minlength=3)))
    model.majority_rate = float(np.mean(hl == majority))
    model.holdout_size = len(hl)
    return model


def simulate_feedback(model: SimulatorModel, state: DualState, action: int, catalog: Catalog, mode: str = "argmax", seed=None):
    """Predicted feedback and its reward.

    ``argmax`` takes the most probable class (ties resolve skip < click <
    order); ``sample`` draws from the softmax with ``seed`` (int or Generator).
    """
    fb = feedback_from_probabilities(model.predict_proba(state, action, catalog), mode, seed)
    return fb, model.rewards.reward(fb)


def feedback_from_probabilities(p: Sequence[float], mode: str = "argmax", seed=None) -> Feedback:
    p = np.asarray(p, dtype=np.float64)
    if mode == "argmax":
        return FEEDBACK_CLASSES[int(np.argmax(p))]
    if mode != "sample":
        raise ValueError(f"unknown simulator mode {mode!r}")
    rng = np.random.default_rng(seed)
    return FEEDBACK_CLASSES[int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), 2))]
