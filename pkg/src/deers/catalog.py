"""Item catalog: categories, skip-gram embeddings, and the recall index."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from deers.session import PADDING_ID, DualState, Feedback, Session

log = logging.getLogger(__name__)


class CatalogFormatError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    item_id: int
    category_id: int
    embedding: np.ndarray


class Catalog:
    """Immutable item universe.

    Embedding row 0 is reserved for the padding item and is all zeros; real
    items occupy rows ``1..n`` in ascending ``item_id`` order.
    """

    padding_id = PADDING_ID

    def __init__(self, item_ids, category_ids, embeddings, neighbors=None, neighbor_k=0):
        ids = np.asarray(item_ids, dtype=np.int64)
        cats = np.asarray(category_ids, dtype=np.int64)
        emb = np.asarray(embeddings, dtype=np.float64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ValueError("catalog needs at least one item")
        if emb.shape[0] != len(ids) or cats.shape != ids.shape or emb.ndim != 2:
            raise ValueError("item_ids, category_ids and embeddings disagree in length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate item_id in catalog")
        if np.any(ids == PADDING_ID):
            raise ValueError("padding id is reserved")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings must be finite")
        order = np.argsort(ids, kind="stable")
        self.item_ids = ids[order]
        self.category_ids = cats[order]
        self.dim = emb.shape[1]
        self.embeddings = np.vstack([np.zeros((1, self.dim)), emb[order]])
        self.embeddings.flags.writeable = False
        self.item_ids.flags.writeable = False
        self.category_ids.flags.writeable = False
        self._neighbors = neighbors or {}
        self.neighbor_k = neighbor_k
        self._all = tuple(int(i) for i in self.item_ids)

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id) -> bool:
        pos = np.searchsorted(self.item_ids, item_id)
        return bool(pos < len(self.item_ids) and self.item_ids[pos] == item_id)

    @property
    def all_ids(self) -> tuple[int, ...]:
        return self._all

    def rows(self, ids) -> np.ndarray:
        """Embedding-row indices for item ids; padding maps to row 0."""
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.item_ids, ids)
        pos_c = np.minimum(pos, len(self.item_ids) - 1)
        found = self.item_ids[pos_c] == ids
        pad = ids == PADDING_ID
        if not np.all(found | pad):
            missing = ids[~(found | pad)]
            raise KeyError(f"unknown item id(s): {missing.ravel()[:5].tolist()}")
        return np.where(pad, 0, pos_c + 1)

    def row(self, item_id: int) -> int:
        return int(self.rows([item_id])[0])

    def embedding(self, item_id: int) -> np.ndarray:
        return self.embeddings[self.row(item_id)]

    def category(self, item_id: int) -> int:
        r = self.row(item_id)
        if r == 0:
            raise KeyError("padding item has no category")
        return int(self.category_ids[r - 1])

    def item(self, item_id: int) -> Item:
        return Item(int(item_id), self.category(item_id), self.embedding(item_id).copy())

    def items(self) -> Iterable[Item]:
        for i in self._all:
            yield self.item(i)

    def neighbors(self, item_id: int) -> tuple[int, ...]:
        if item_id not in self:
            raise KeyError(f"unknown item id {item_id}")
        return self._neighbors.get(int(item_id), ())


def _positive_sentences(sessions: Sequence[Session]) -> list[list[int]]:
    sentences = []
    for s in sessions:
        if not isinstance(s, Session):
            raise TypeError("train_embeddings expects Session objects")
        for e in s.events:
            if not isinstance(e.feedback, Feedback):
                raise ValueError(f"unknown feedback label {e.feedback!r}")
        sentences.append([e.item_id for e in s.events if e.feedback.positive])
    return sentences


def train_embeddings(
    sessions: Sequence[Session],
    dim: int = 50,
    epochs: int = 5,
    seed: int = 0,
    window: int = 2,
    negatives: int = 5,
    learning_rate: float = 0.025,
    batch_size: int = 64,
) -> Catalog:
    """Skip-gram with negative sampling over each session's clicked/ordered items.

    Every item observed in ``sessions`` gets an embedding, including items
    that were only ever skipped (those keep their random initialisation).
    Pairs are processed in minibatches; the learning rate decays linearly to
    1e-4 of its start value.
    """
    sessions = list(sessions)
    if not sessions:
        raise ValueError("empty corpus")
    if dim < 2:
        raise ValueError("embedding dim must be >= 2")
    sentences = _positive_sentences(sessions)

    cats: dict[int, int] = {}
    for s in sessions:
        for e in s.events:
            prev = cats.setdefault(e.item_id, e.category_id)
            if prev != e.category_id:
                raise ValueError(f"item {e.item_id} logged under categories {prev} and {e.category_id}")
    ids = np.array(sorted(cats), dtype=np.int64)
    index = {int(i): k for k, i in enumerate(ids)}
    n = len(ids)

    rng = np.random.default_rng(seed)
    w_in = (rng.random((n, dim)) - 0.5) / dim
    w_out = np.zeros((n, dim))

    counts = np.zeros(n)
    centers, contexts = [], []
    for sent in sentences:
        rows = [index[i] for i in sent]
        for r in rows:
            counts[r] += 1
        for p, c in enumerate(rows):
            for q in range(max(0, p - window), min(len(rows), p + window + 1)):
                if q != p:
                    centers.append(c)
                    contexts.append(rows[q])
    centers = np.asarray(centers, dtype=np.int64)
    contexts = np.asarray(contexts, dtype=np.int64)

    if len(centers):
        noise = counts**0.75
        noise /= noise.sum()
        n_batches = epochs * int(np.ceil(len(centers) / batch_size))
        step = 0
        for _ in range(epochs):
            perm = rng.permutation(len(centers))
            for start in range(0, len(perm), batch_size):
                idx = perm[start : start + batch_size]
                lr = max(learning_rate * (1.0 - step / n_batches), learning_rate * 1e-4)
                step += 1
                c = centers[idx]
                targets = np.concatenate(
                    [contexts[idx][:, None], rng.choice(n, size=(len(idx), negatives), p=noise)], axis=1
                )
                labels = np.zeros(targets.shape)
                labels[:, 0] = 1.0
                v = w_in[c]  # (b, d)
                u = w_out[targets]  # (b, k+1, d)
                score = expit(np.einsum("bkd,bd->bk", u, v))
                g = (labels - score) * lr
                np.add.at(w_out, targets, g[:, :, None] * v[:, None, :])
                np.add.at(w_in, c, np.einsum("bk,bkd->bd", g, u))
    else:
        log.warning("corpus has no positive events; embeddings stay at initialisation")

    return Catalog(ids, [cats[int(i)] for i in ids], w_in)


def build_neighbor_index(catalog: Catalog, k: int) -> Catalog:
    """Attach each item's top-``k`` cosine neighbours (ties by ascending id)."""
    if k < 1:
        raise ValueError("k must be positive")
    emb = catalog.embeddings[1:]
    norms = np.linalg.norm(emb, axis=1)
    bad = np.flatnonzero(norms == 0)
    if len(bad):
        raise DegenerateEmbeddingError(f"degenerate embedding for item {int(catalog.item_ids[bad[0]])}")
    unit = emb / norms[:, None]
    n = len(catalog)
    kk = min(k, n - 1)
    ids = catalog.item_ids
    neighbors = {}
    for start in range(0, n, 1024):
        sims = unit[start : start + 1024] @ unit.T
        for off, row in enumerate(sims):
            i = start + off
            order = np.lexsort((ids, -row))
            order = order[order != i][:kk]
            neighbors[int(ids[i])] = tuple(int(j) for j in ids[order])
    return Catalog(catalog.item_ids, catalog.category_ids, emb, neighbors, neighbor_k=kk)


def recall_candidates(catalog: Catalog, positive_history: Iterable[int], k: int) -> set[int]:
    """History items plus each one's top-``k`` neighbours; empty history gives an empty set."""
    history = [int(i) for i in positive_history if i != PADDING_ID]
    if not history:
        return set()
    if k > catalog.neighbor_k and catalog.neighbor_k < len(catalog) - 1:
        raise ValueError(f"neighbor index holds {catalog.neighbor_k} neighbours, {k} requested")
    out = set()
    for i in history:
        out.add(i)
        out.update(catalog.neighbors(i)[:k])
    return out


def candidate_pool(catalog: Catalog, positive_history: Iterable[int], k: int) -> tuple[int, ...]:
    """Sorted recall set, falling back to the whole catalog for a cold start."""
    cands = recall_candidates(catalog, positive_history, k)
    if not cands:
        return catalog.all_ids
    return tuple(sorted(cands))


def ensure_index(catalog: Catalog, k: int) -> Catalog:
    """The catalog itself when its neighbour lists are long enough, else a rebuilt index."""
    if catalog.neighbor_k >= min(k, len(catalog) - 1):
        return catalog
    return build_neighbor_index(catalog, k)


def known_initial_state(session: Session, catalog: Catalog, n: int) -> DualState:
    """The session's starting windows with items missing from the catalog left out."""
    pos = [i for i in session.initial_positive if i in catalog]
    neg = [i for i in session.initial_negative if i in catalog]
    return DualState.from_history(pos, neg, n)


def write_catalog(path, catalog: Catalog) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(catalog)} {catalog.dim}\n")
        for r, (i, c) in enumerate(zip(catalog.item_ids, catalog.category_ids), start=1):
            vals = " ".join(repr(float(x)) for x in catalog.embeddings[r])
            fh.write(f"{int(i)} {int(c)} {vals}\n")


def read_catalog(path, k: int | None = None) -> Catalog:
    """Parse a catalog file; rebuild the neighbour index when ``k`` is given."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CatalogFormatError("header must be '<item_count> <dim>'")
        count, dim = int(header[0]), int(header[1])
        ids, cats, rows = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 2:
                raise CatalogFormatError(f"line {lineno}: expected {dim + 2} fields, got {len(parts)}")
            ids.append(int(parts[0]))
            cats.append(int(parts[1]))
            rows.append([float(x) for x in parts[2:]])
    if len(ids) != count:
        raise CatalogFormatError(f"header declares {count} items, file has {len(ids)}")
    cat = Catalog(ids, cats, np.array(rows).reshape(count, dim))
    return build_neighbor_index(cat, k) if k else cat
