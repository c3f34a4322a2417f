"""Experience replay with proportional prioritized sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from deers.session import DualState


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Transition:
    state: DualState
    action: int
    reward: float
    next_state: DualState
    competitor: int | None = None
    terminal: bool = False
    candidates: tuple[int, ...] = ()


class ReplayMemory:
    """Fixed-capacity FIFO ring of transitions.

    Sampling probability of slot ``i`` is ``(priority_i + eps)^beta``
    normalised over stored slots.  Priorities are stored raw; the floor is
    applied only when weights are formed.
    """

    def __init__(self, capacity: int = 100_000, priority_exponent: float = 0.6, priority_floor: float = 0.01):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if priority_exponent < 0:
            raise ValueError("priority exponent must be nonnegative")
        if priority_floor <= 0:
            raise ValueError("priority floor must be positive")
        self.capacity = capacity
        self.beta = priority_exponent
        self.eps = priority_floor
        self._items: list[Transition | None] = [None] * capacity
        self._priority = np.zeros(capacity)
        self._weight = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __getitem__(self, index: int) -> Transition:
        self._check(index)
        return self._items[index]

    def _check(self, index: int):
        if not 0 <= index < self._size:
            raise IndexError(f"replay index {index} out of range (size {self._size})")

    def _set_priority(self, idx, value):
        self._priority[idx] = value
        self._weight[idx] = (self._priority[idx] + self.eps) ** self.beta

    def priority(self, index: int) -> float:
        self._check(index)
        return float(self._priority[index])

    def push(self, transition: Transition) -> int:
        """Store at the current max priority (1 when empty); returns the slot."""
        p = float(self._priority[: self._size].max()) if self._size else 1.0
        slot = self._next
        self._items[slot] = transition
        self._set_priority(slot, p)
        self._next = (slot + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return slot

    def oldest_first(self) -> Iterator[Transition]:
        start = self._next if self._size == self.capacity else 0
        for k in range(self._size):
            yield self._items[(start + k) % self.capacity]

    def probabilities(self) -> np.ndarray:
        w = self._weight[: self._size]
        return w / w.sum()

    def sample(self, batch_size: int, seed=None) -> list[tuple[int, Transition]]:
        """Draw ``batch_size`` slots with replacement; ``seed`` may be a Generator."""
        if self._size == 0:
            raise SamplingError("cannot sample from an empty replay memory")
        rng = np.random.default_rng(seed)
        idx = rng.choice(self._size, size=batch_size, replace=True, p=self.probabilities())
        return [(int(i), self._items[i]) for i in idx]

    def update_priorities(self, indices, td_errors) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        td = np.abs(np.asarray(td_errors, dtype=np.float64))
        if indices.shape != td.shape:
            raise ValueError("indices and td_errors differ in length")
        if np.any(indices < 0) or np.any(indices >= self._size):
            raise IndexError("priority update index out of range")
        self._set_priority(indices, td)

    def dump(self, path) -> None:
        """Debug dump: one JSON object per transition, oldest first, with its priority."""
        start = self._next if self._size == self.capacity else 0
        with open(path, "w", encoding="utf-8") as fh:
            for k in range(self._size):
                slot = (start + k) % self.capacity
                t = self._items[slot]
                fh.write(json.dumps({
                    "slot": slot,
                    "state": {"positive": list(t.state.positive), "negative": list(t.state.negative)},
                    "action": t.action,
                    "reward": t.reward,
                    "next_state": {"positive": list(t.next_state.positive), "negative": list(t.next_state.negative)},
                    "competitor": t.competitor,
                    "terminal": t.terminal,
                    "priority": float(self._priority[slot]),
                }) + "\n")
