"""Off-policy training from logged sessions."""

from __future__ import annotations

import json
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from deers.catalog import Catalog, candidate_pool, ensure_index, known_initial_state, read_catalog
from deers.qnetwork import (
    Architecture,
    ConfigError,
    Hyperparameters,
    NetworkParameters,
    QVariant,
    TDBatch,
    TrainingAborted,
    apply_update,
    init_parameters,
    sync_target,
    td_loss_terms,
    td_targets,
)
from deers.replay import ReplayMemory, Transition
from deers.session import Session, SessionEvent, read_sessions, transition

log = logging.getLogger(__name__)

LATENTS_MARKER = "deers-ground-truth-latents"


@dataclass
class TrainerConfig:
    variant: QVariant = QVariant.DEERS
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    arch: Architecture = field(default_factory=Architecture)
    batch_size: int = 32
    target_sync_interval: int = 1000
    recall_k: int = 20
    max_sessions: int | None = None
    passes: int = 1
    log_interval: int = 100
    replay_capacity: int = 100_000
    priority_exponent: float = 0.6
    priority_floor: float = 0.01
    sessions_path: str | None = None
    catalog_path: str | None = None
    debug_dir: str | None = None

    def __post_init__(self):
        self.variant = QVariant(self.variant)
        if self.target_sync_interval < 1:
            raise ConfigError("target_sync_interval must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.recall_k < 1:
            raise ConfigError("recall_k must be >= 1")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")

    @property
    def seed(self) -> int:
        return self.hyper.seed


@dataclass(frozen=True)
class TraceRow:
    update_index: int
    mean_loss: float
    mean_td_error: float


@dataclass
class TrainResult:
    params: NetworkParameters
    target: NetworkParameters
    trace: list[TraceRow]
    updates: int
    memory: ReplayMemory
    dropped_events: int = 0


def _opposite(a: SessionEvent, b: SessionEvent) -> bool:
    return a.feedback.positive != b.feedback.positive


def _competitor_in(events: Sequence[SessionEvent], pos: int) -> int | None:
    target = events[pos]
    best, best_key = None, None
    for k, ev in enumerate(events):
        if k == pos or ev.category_id != target.category_id or not _opposite(ev, target):
            continue
        key = (abs(ev.time_index - target.time_index), ev.time_index)
        if best_key is None or key < best_key:
            best, best_key = ev.item_id, key
    return best


def find_competitor(session: Session, t: int) -> int | None:
    """Closest-in-time same-category event with opposite feedback polarity.

    Searches the whole session, past and future.  Equidistant candidates
    resolve to the earlier event.
    """
    for pos, ev in enumerate(session.events):
        if ev.time_index == t:
            return _competitor_in(session.events, pos)
    raise IndexError(f"session {session.session_id} has no event at t={t}")


def refuse_latents(path):
    if path is None:
        return
    try:
        with open(path, encoding="utf-8") as fh:
            head = fh.read(256)
    except (OSError, UnicodeDecodeError):
        return
    if LATENTS_MARKER in head:
        raise ConfigError(f"{path} is a ground-truth latents file; training must not read it")


def session_transitions(session: Session, catalog: Catalog, window: int, recall_k: int):
    """Transitions along a logged session; returns (transitions, dropped event count)."""
    events = [e for e in session.events if e.item_id in catalog]
    dropped = len(session.events) - len(events)
    if dropped:
        log.warning("session %s: dropped %d events with unknown items", session.session_id, dropped)
    state = known_initial_state(session, catalog, window)
    out = []
    for pos, ev in enumerate(events):
        nxt = transition(state, ev.item_id, ev.reward)
        terminal = pos == len(events) - 1
        if terminal:
            cands: tuple[int, ...] = ()
        else:
            pool = set(candidate_pool(catalog, nxt.positive_items(), recall_k))
            pool.add(events[pos + 1].item_id)
            cands = tuple(sorted(pool))
        out.append(Transition(state, ev.item_id, ev.reward, nxt, _competitor_in(events, pos), terminal, cands))
        state = nxt
    return out, dropped


def replay_session(session: Session, catalog: Catalog, memory: ReplayMemory, config: TrainerConfig) -> int:
    """Push one transition per (known-item) event; returns the number pushed."""
    trans, _ = session_transitions(session, catalog, config.arch.window, config.recall_k)
    for t in trans:
        memory.push(t)
    return len(trans)


def _dump_batch(config: TrainerConfig, trans, y) -> str:
    directory = config.debug_dir or tempfile.gettempdir()
    Path(directory).mkdir(parents=True, exist_ok=True)
    fd, path = tempfile.mkstemp(prefix="deers-bad-batch-", suffix=".json", dir=directory)
    rows = [
        {
            "state": [list(t.state.positive), list(t.state.negative)],
            "action": t.action,
            "reward": t.reward,
            "next_state": [list(t.next_state.positive), list(t.next_state.negative)],
            "competitor": t.competitor,
            "terminal": t.terminal,
            "y": float(v),
        }
        for t, v in zip(trans, y)
    ]
    with open(fd, "w", encoding="utf-8") as fh:
        json.dump(rows, fh)
    return path


def train(
    config: TrainerConfig,
    sessions: Sequence[Session] | None = None,
    catalog: Catalog | None = None,
    init: NetworkParameters | None = None,
) -> TrainResult:
    """Replay each session into memory, taking one minibatch step per stored event."""
    for p in (config.sessions_path, config.catalog_path):
        refuse_latents(p)
    if sessions is None:
        if config.sessions_path is None:
            raise ConfigError("no sessions given")
        sessions = read_sessions(config.sessions_path)
    if catalog is None:
        if config.catalog_path is None:
            raise ConfigError("no catalog given")
        catalog = read_catalog(config.catalog_path)
    if catalog.dim != config.arch.embedding_dim:
        raise ConfigError(f"catalog dim {catalog.dim} != architecture embedding_dim {config.arch.embedding_dim}")
    catalog = ensure_index(catalog, config.recall_k)

    hyper = config.hyper
    alpha = config.variant.effective_alpha(hyper.alpha)
    params = init.copy() if init is not None else init_parameters(config.arch, config.variant, hyper.seed)
    if params.variant is not config.variant:
        raise ConfigError("initial parameters are for a different variant")
    target = sync_target(params)
    memory = ReplayMemory(config.replay_capacity, config.priority_exponent, config.priority_floor)
    rng = np.random.default_rng([hyper.seed, 1])
    E = catalog.embeddings

    selected = list(sessions)
    if config.max_sessions is not None:
        selected = selected[: config.max_sessions]

    trace: list[TraceRow] = []
    updates = 0
    dropped = 0
    acc_loss = acc_td = 0.0
    acc_n = 0
    for _ in range(config.passes):
        for session in selected:
            trans, d = session_transitions(session, catalog, config.arch.window, config.recall_k)
            dropped += d
            for t in trans:
                memory.push(t)
            for _ in range(len(trans)):
                picked = memory.sample(config.batch_size, rng)
                idx = [i for i, _ in picked]
                batch_t = [t for _, t in picked]
                y = td_targets(
                    target,
                    catalog,
                    [t.reward for t in batch_t],
                    [t.next_state for t in batch_t],
                    [t.candidates for t in batch_t],
                    hyper.gamma,
                    [t.terminal for t in batch_t],
                )
                batch = TDBatch.from_transitions(list(zip(batch_t, y)), catalog)
                loss, grad, td = td_loss_terms(params, batch, alpha, E)
                if not np.isfinite(loss):
                    path = _dump_batch(config, batch_t, y)
                    raise TrainingAborted(f"non-finite loss at update {updates}; batch written to {path}")
                params = apply_update(params, grad, hyper.learning_rate, hyper.gradient_clip)
                memory.update_priorities(idx, td)
                updates += 1
                acc_loss += loss
                acc_td += float(np.mean(np.abs(td)))
                acc_n += 1
                if updates % config.target_sync_interval == 0:
                    target = sync_target(params)
                if updates % config.log_interval == 0:
                    trace.append(TraceRow(updates, acc_loss / acc_n, acc_td / acc_n))
                    log.info("update %d loss %.5f |td| %.5f", updates, acc_loss / acc_n, acc_td / acc_n)
                    acc_loss = acc_td = 0.0
                    acc_n = 0
    if acc_n:
        trace.append(TraceRow(updates, acc_loss / acc_n, acc_td / acc_n))
    return TrainResult(params, target, trace, updates, memory, dropped)


def write_trace(path, trace: Sequence[TraceRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("update_index,mean_loss,mean_td_error\n")
        for row in trace:
            fh.write(f"{row.update_index},{row.mean_loss!r},{row.mean_td_error!r}\n")
