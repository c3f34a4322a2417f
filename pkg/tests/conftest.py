from __future__ import annotations

import numpy as np
import pytest

from deers.catalog import Catalog, build_neighbor_index
from deers.session import DualState, Feedback, Session, SessionEvent


def make_catalog(n_items=12, dim=6, n_categories=3, seed=0, k=4) -> Catalog:
    rng = np.random.default_rng(seed)
    ids = np.arange(n_items)
    cat = Catalog(ids, ids % n_categories, rng.normal(size=(n_items, dim)))
    return build_neighbor_index(cat, k) if k else cat


def random_state(rng, catalog: Catalog, n: int) -> DualState:
    ids = np.array(catalog.all_ids)
    pos = [int(i) for i in rng.choice(ids, size=rng.integers(0, n + 1))]
    neg = [int(i) for i in rng.choice(ids, size=rng.integers(0, n + 1))]
    return DualState.from_history(pos, neg, n)


def make_session(sid, items, categories, feedbacks, initial=((), ())) -> Session:
    events = [
        SessionEvent(t, int(i), int(c), Feedback(f))
        for t, (i, c, f) in enumerate(zip(items, categories, feedbacks), start=1)
    ]
    return Session(sid, events, tuple(initial[0]), tuple(initial[1]))


# Worked example: items a1..a7 are ids 1..7; categories A=0, B=1, C=2.
TABLE1 = [
    (1, 0, "skip"),
    (2, 1, "click"),
    (3, 0, "click"),
    (4, 2, "skip"),
    (5, 1, "skip"),
    (6, 0, "skip"),
    (7, 2, "order"),
]


@pytest.fixture
def table1_session() -> Session:
    items, cats, fbs = zip(*TABLE1)
    return make_session(0, items, cats, fbs)


@pytest.fixture
def small_catalog() -> Catalog:
    return make_catalog()


@pytest.fixture
def table1_catalog() -> Catalog:
    rng = np.random.default_rng(3)
    ids = np.arange(1, 8)
    cats = [c for _, c, _ in TABLE1]
    return build_neighbor_index(Catalog(ids, cats, rng.normal(size=(7, 4))), 3)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
