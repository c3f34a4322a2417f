"""Synthetic session logs with known user dynamics.

Each user has a latent preference vector ``u``; each item a latent ``v``
near its category centre.  A logged step picks an item with a mixture
policy (softmax over ``u . v`` or uniform) and the user responds with

    score = u . v_a - boredom * (# of the user's last ``boredom_window``
                                 skips sharing a's category) + noise * eps

ordering above ``order_threshold``, clicking above ``click_threshold``, and
skipping otherwise.  Boredom is what makes skipped items informative.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from deers.session import DEFAULT_REWARDS, Feedback, RewardMapping, Session, SessionEvent
from deers.trainer import LATENTS_MARKER


class DegenerateWorldError(RuntimeError):
    pass


@dataclass
class SyntheticWorld:
    n_items: int = 200
    n_categories: int = 10
    latent_dim: int = 8
    user_scale: float = 1.5
    item_noise: float = 0.3
    boredom: float = 0.6
    boredom_window: int = 10
    click_threshold: float = 1.0
    order_threshold: float = 3.0
    noise: float = 0.3
    preference_share: float = 0.8
    policy_temperature: float = 0.5
    history_keep: int = 20
    seed: int = 0
    user_latents: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("n_items", "n_categories", "latent_dim", "boredom_window", "history_keep"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.order_threshold < self.click_threshold:
            raise ValueError("order_threshold must be >= click_threshold")
        if not 0.0 <= self.preference_share <= 1.0:
            raise ValueError("preference_share must lie in [0, 1]")
        if self.boredom < 0 or self.noise < 0:
            raise ValueError("boredom and noise must be nonnegative")

    def config_dict(self) -> dict:
        d = asdict(self)
        d.pop("user_latents")
        return d

    def item_categories(self) -> np.ndarray:
        return np.arange(self.n_items) % self.n_categories

    def category_centres(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7])
        raw = rng.normal(size=(self.latent_dim, self.n_categories))
        if self.latent_dim >= self.n_categories:
            q, _ = np.linalg.qr(raw)
            return q[:, : self.n_categories].T
        return (raw / np.linalg.norm(raw, axis=0)).T

    def item_latents(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 8])
        centres = self.category_centres()[self.item_categories()]
        return centres + self.item_noise * rng.normal(size=centres.shape) / np.sqrt(self.latent_dim)

    def user_latent(self, user: int) -> np.ndarray:
        if self.user_latents is not None:
            return np.asarray(self.user_latents[user], dtype=np.float64)
        rng = np.random.default_rng([self.seed, 9, user])
        return self.user_scale * rng.normal(size=self.latent_dim)

    def feedback(self, affinity: float, same_cat_skips: int, eps: float) -> Feedback:
        score = affinity - self.boredom * same_cat_skips + self.noise * eps
        if score > self.order_threshold:
            return Feedback.ORDER
        if score > self.click_threshold:
            return Feedback.CLICK
        return Feedback.SKIP


def _user_sessions(world: SyntheticWorld, user: int, n_sessions: int, length: int, items, cats, rewards):
    rng = np.random.default_rng([world.seed, user])
    u = world.user_latent(user)
    affinity = items @ u
    logits = affinity / world.policy_temperature
    pref = np.exp(logits - logits.max())
    pref /= pref.sum()
    positives: deque[int] = deque(maxlen=world.history_keep)
    negatives: deque[int] = deque(maxlen=max(world.history_keep, world.boredom_window))
    out = []
    for s in range(n_sessions):
        init_pos = tuple(positives)
        init_neg = tuple(negatives)[-world.history_keep :]
        events = []
        for t in range(1, length + 1):
            if rng.random() < world.preference_share:
                a = int(rng.choice(len(pref), p=pref))
            else:
                a = int(rng.integers(len(pref)))
            recent = list(negatives)[-world.boredom_window :]
            k = sum(1 for j in recent if cats[j] == cats[a])
            fb = world.feedback(float(affinity[a]), k, float(rng.normal()))
            events.append(SessionEvent(t, a, int(cats[a]), fb, rewards.reward(fb)))
            (positives if fb.positive else negatives).append(a)
        out.append((s, init_pos, init_neg, events))
    return out


def generate_world(
    world: SyntheticWorld,
    users: int,
    sessions_per_user: int,
    session_length: int,
    rewards: RewardMapping = DEFAULT_REWARDS,
    check: bool = True,
) -> list[Session]:
    """Simulate logged sessions; ids are assigned round-major so id order is time order."""
    if min(users, sessions_per_user, session_length) < 1:
        raise ValueError("users, sessions_per_user and session_length must be positive")
    items = world.item_latents()
    cats = world.item_categories()
    sessions = []
    for user in range(users):
        for s, ip, ineg, events in _user_sessions(world, user, sessions_per_user, session_length, items, cats, rewards):
            sessions.append(Session(s * users + user, events, ip, ineg, user_id=user))
    sessions.sort(key=lambda x: x.session_id)
    if check:
        check_nondegenerate(sessions)
    return sessions


def feedback_frequencies(sessions: Sequence[Session]) -> dict[str, float]:
    counts = {fb.value: 0 for fb in Feedback}
    for s in sessions:
        for e in s.events:
            counts[e.feedback.value] += 1
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


def check_nondegenerate(sessions: Sequence[Session], floor: float = 0.01) -> None:
    freqs = feedback_frequencies(sessions)
    rare = [k for k, v in freqs.items() if v <= floor]
    if rare:
        raise DegenerateWorldError(
            f"feedback classes {rare} occur in <= {floor:.0%} of events ({freqs}); "
            "adjust click/order thresholds or user_scale and regenerate"
        )


def write_latents(path, world: SyntheticWorld, users: int) -> None:
    """Ground-truth latents for analysis only; the trainer refuses this file."""
    obj = {
        LATENTS_MARKER: True,
        "world": world.config_dict(),
        "item_latents": world.item_latents().tolist(),
        "user_latents": [world.user_latent(u).tolist() for u in range(users)],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj), encoding="utf-8")
