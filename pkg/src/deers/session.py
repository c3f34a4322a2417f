"""Sessions, feedback, and the dual positive/negative state.

A session is a time-ordered list of (item, feedback) events.  The agent's
view of the user is a :class:`DualState`: the ``N`` most recent clicked or
ordered items and the ``N`` most recent skipped items, each front-padded
with :data:`PADDING_ID` when the history is short.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

PADDING_ID = -1


class SessionFormatError(ValueError):
    """Raised when a session log line or event is malformed."""


class Feedback(str, Enum):
    SKIP = "skip"
    CLICK = "click"
    ORDER = "order"

    @property
    def index(self) -> int:
        """Class index in the fixed (skip, click, order) order."""
        return _FEEDBACK_ORDER.index(self)

    @property
    def positive(self) -> bool:
        return self is not Feedback.SKIP

    @classmethod
    def parse(cls, value) -> "Feedback":
        if isinstance(value, Feedback):
            return value
        try:
            return cls(value)
        except ValueError:
            raise SessionFormatError(f"unknown feedback label {value!r}") from None


_FEEDBACK_ORDER = (Feedback.SKIP, Feedback.CLICK, Feedback.ORDER)
FEEDBACK_CLASSES = _FEEDBACK_ORDER


@dataclass(frozen=True)
class RewardMapping:
    skip: float = 0.0
    click: float = 1.0
    order: float = 5.0

    def __post_init__(self):
        if self.skip != 0.0:
            raise ValueError("skip reward must be 0: transitions key on reward > 0")
        if self.click <= 0 or self.order <= 0:
            raise ValueError("click and order rewards must be positive")

    def reward(self, feedback: Feedback) -> float:
        return {Feedback.SKIP: self.skip, Feedback.CLICK: self.click, Feedback.ORDER: self.order}[
            Feedback.parse(feedback)
        ]

    def as_array(self):
        return (self.skip, self.click, self.order)


DEFAULT_REWARDS = RewardMapping()


@dataclass(frozen=True)
class SessionEvent:
    time_index: int
    item_id: int
    category_id: int
    feedback: Feedback
    reward: float = math.nan

    def __post_init__(self):
        fb = Feedback.parse(self.feedback)
        object.__setattr__(self, "feedback", fb)
        if math.isnan(self.reward):
            object.__setattr__(self, "reward", DEFAULT_REWARDS.reward(fb))
        if self.time_index < 0:
            raise SessionFormatError("time_index must be nonnegative")
        if self.item_id == PADDING_ID:
            raise SessionFormatError("padding id cannot appear in a session log")


@dataclass(frozen=True)
class DualState:
    """Positive and negative item windows, oldest first."""

    positive: tuple[int, ...]
    negative: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple(int(i) for i in self.positive))
        object.__setattr__(self, "negative", tuple(int(i) for i in self.negative))
        if len(self.positive) != len(self.negative):
            raise ValueError("positive and negative windows must have equal length")

    @property
    def window(self) -> int:
        return len(self.positive)

    @classmethod
    def empty(cls, n: int) -> "DualState":
        return cls((PADDING_ID,) * n, (PADDING_ID,) * n)

    @classmethod
    def from_history(cls, positives: Sequence[int], negatives: Sequence[int], n: int) -> "DualState":
        """Keep the last ``n`` of each history, front-padding short ones."""
        return cls(_pad_tail(positives, n), _pad_tail(negatives, n))

    def positive_items(self) -> tuple[int, ...]:
        return tuple(i for i in self.positive if i != PADDING_ID)

    def negative_items(self) -> tuple[int, ...]:
        return tuple(i for i in self.negative if i != PADDING_ID)


def _pad_tail(items: Sequence[int], n: int) -> tuple[int, ...]:
    tail = tuple(items)[-n:] if n > 0 else ()
    return (PADDING_ID,) * (n - len(tail)) + tail


def _check_step(action: int, reward: float):
    if action == PADDING_ID:
        raise ValueError("action cannot be the padding item")
    if reward < 0:
        raise ValueError(f"negative reward {reward} is undefined for transitions")


def transition(state: DualState, action: int, reward: float) -> DualState:
    """Positive reward shifts the positive window, zero shifts the negative one."""
    _check_step(action, reward)
    if reward > 0:
        return DualState(state.positive[1:] + (action,), state.negative)
    return DualState(state.positive, state.negative[1:] + (action,))


def transition_basic(window: tuple[int, ...], action: int, reward: float) -> tuple[int, ...]:
    """Positive-only state update: skips leave the window untouched."""
    _check_step(action, reward)
    if reward > 0:
        return tuple(window[1:]) + (action,)
    return tuple(window)


@dataclass(frozen=True)
class Session:
    """One logged session.

    ``initial_positive``/``initial_negative`` hold the user's unpadded history
    before the session (oldest first); :meth:`initial_state` cuts it to any
    window length.
    """

    session_id: int
    events: tuple[SessionEvent, ...]
    initial_positive: tuple[int, ...] = ()
    initial_negative: tuple[int, ...] = ()
    user_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "initial_positive", tuple(self.initial_positive))
        object.__setattr__(self, "initial_negative", tuple(self.initial_negative))
        if not self.events:
            raise SessionFormatError(f"session {self.session_id} has no events")
        for k, ev in enumerate(self.events, start=1):
            if ev.time_index != k:
                raise SessionFormatError(
                    f"session {self.session_id}: time indices must run 1..T without gaps"
                )

    def __len__(self) -> int:
        return len(self.events)

    def initial_state(self, n: int) -> DualState:
        return DualState.from_history(self.initial_positive, self.initial_negative, n)

    def states(self, n: int) -> Iterator[tuple[DualState, SessionEvent, DualState]]:
        """Yield (state, event, next_state) along the logged trajectory."""
        state = self.initial_state(n)
        for ev in self.events:
            nxt = transition(state, ev.item_id, ev.reward)
            yield state, ev, nxt
            state = nxt

    def with_rewards(self, mapping: RewardMapping) -> "Session":
        events = tuple(
            SessionEvent(e.time_index, e.item_id, e.category_id, e.feedback, mapping.reward(e.feedback))
            for e in self.events
        )
        return Session(self.session_id, events, self.initial_positive, self.initial_negative, self.user_id)


def session_to_json(session: Session) -> dict:
    obj = {
        "session_id": session.session_id,
        "events": [
            {"t": e.time_index, "item": e.item_id, "category": e.category_id, "feedback": e.feedback.value}
            for e in session.events
        ],
    }
    if session.user_id is not None:
        obj["user"] = session.user_id
    if session.initial_positive or session.initial_negative:
        obj["initial_state"] = {
            "positive": list(session.initial_positive),
            "negative": list(session.initial_negative),
        }
    return obj


def session_from_json(obj: dict, rewards: RewardMapping = DEFAULT_REWARDS) -> Session:
    try:
        events = tuple(
            SessionEvent(
                int(e["t"]),
                int(e["item"]),
                int(e["category"]),
                Feedback.parse(e["feedback"]),
                rewards.reward(Feedback.parse(e["feedback"])),
            )
            for e in obj["events"]
        )
        init = obj.get("initial_state") or {}
        return Session(
            int(obj["session_id"]),
            events,
            tuple(int(i) for i in init.get("positive", ())),
            tuple(int(i) for i in init.get("negative", ())),
            obj.get("user"),
        )
    except (KeyError, TypeError) as exc:
        raise SessionFormatError(f"malformed session record: {exc}") from exc


def read_sessions(path, rewards: RewardMapping = DEFAULT_REWARDS) -> list[Session]:
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SessionFormatError(f"{path}:{lineno}: {exc}") from exc
            sessions.append(session_from_json(obj, rewards))
    return sessions


def write_sessions(path, sessions: Iterable[Session]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_json(s), separators=(",", ":")))
            fh.write("\n")
