"""Item-based collaborative filtering over purchase records.

The cloud only ever sees transactional data, so candidate items are chosen
from who-bought-what. For user ``k`` and item ``m``::

    p[k, m] = sum_b sim(m, b) * x[k, b] / sum_b |sim(m, b)|

with cosine similarity between purchase columns.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from cooprec.data import Behavior, InteractionRecord


class UnknownUserError(KeyError):
    pass


@dataclass(frozen=True)
class Threshold:
    p_candidate: float

    def __post_init__(self):
        if not 0.0 <= self.p_candidate <= 1.0:
            raise ValueError("p_candidate must lie in [0, 1]")


@dataclass(frozen=True)
class Proportion:
    q: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError("proportion must lie in (0, 1]")


Selection = Threshold | Proportion


class InteractionMatrix:
    """Binary user x item purchase matrix with sorted id indexes."""

    def __init__(self, users: Sequence[int], items: Sequence[int], entries: np.ndarray, k_neighbors: int | None = None):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.entries = np.asarray(entries, dtype=np.float64).reshape(len(self.users), len(self.items))
        self.k_neighbors = k_neighbors
        self._user_index = {int(u): k for k, u in enumerate(self.users)}
        self._item_index = {int(i): k for k, i in enumerate(self.items)}
        self._sim = None
        self._weights = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def column(self, item_id: int) -> np.ndarray:
        return self.entries[:, self.item_pos(item_id)]

    def user_pos(self, user_id: int) -> int:
        try:
            return self._user_index[int(user_id)]
        except KeyError:
            raise UnknownUserError(f"user {user_id} has no purchases") from None

    def item_pos(self, item_id: int) -> int:
        try:
            return self._item_index[int(item_id)]
        except KeyError:
            raise KeyError(f"item {item_id} not in the purchase matrix") from None

    def has_user(self, user_id: int) -> bool:
        return int(user_id) in self._user_index

    def similarity(self) -> np.ndarray:
        """Cosine similarity between all item columns; zero columns give 0."""
        if self._sim is None:
            x = self.entries
            norms = np.sqrt((x * x).sum(axis=0))
            safe = np.where(norms > 0, norms, 1.0)
            sim = (x.T @ x) / np.outer(safe, safe)
            zero = norms == 0
            sim[zero, :] = 0.0
            sim[:, zero] = 0.0
            self._sim = sim
        return self._sim

    def neighbor_weights(self) -> np.ndarray:
        """Similarity rows restricted to each item's k most similar items.

        Ties in similarity go to the lower item id. ``k_neighbors`` of None
        (or >= item count) keeps every item.
        """
        if self._weights is None:
            sim = self.similarity()
            M = sim.shape[0]
            k = self.k_neighbors
            if k is None or k >= M:
                self._weights = sim
            else:
                w = np.zeros_like(sim)
                for m in range(M):
                    order = np.lexsort((np.arange(M), -sim[m]))[:k]
                    w[m, order] = sim[m, order]
                self._weights = w
        return self._weights

    def click_probs(self, user_id: int) -> np.ndarray:
        """p[k, m] for every item column of the matrix."""
        x = self.entries[self.user_pos(user_id)]
        w = self.neighbor_weights()
        denom = np.abs(w).sum(axis=1)
        num = w @ x
        return np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)


def build_matrix(records: Iterable[InteractionRecord], k_neighbors: int | None = None) -> InteractionMatrix:
    records = list(records)
    for r in records:
        if r.behavior is not Behavior.PURCHASE:
            raise ValueError(f"purchase matrix got a {r.behavior.value} record: {r}")
    users = sorted({r.user_id for r in records})
    items = sorted({r.item_id for r in records})
    u_pos = {u: k for k, u in enumerate(users)}
    i_pos = {i: k for k, i in enumerate(items)}
    entries = np.zeros((len(users), len(items)))
    for r in records:
        entries[u_pos[r.user_id], i_pos[r.item_id]] = 1.0
    return InteractionMatrix(users, items, entries, k_neighbors)


def item_similarity(matrix: InteractionMatrix, m: int, b: int) -> float:
    return float(matrix.similarity()[matrix.item_pos(m), matrix.item_pos(b)])


def predict_click_prob(matrix: InteractionMatrix, user: int, item: int) -> float:
    return float(matrix.click_probs(user)[matrix.item_pos(item)])


@dataclass(frozen=True)
class CandidateSet:
    user_id: int
    items: tuple[int, ...]
    scores: tuple[float, ...]
    selection: Selection

    def __len__(self):
        return len(self.items)


def candidate_set(
    matrix: InteractionMatrix,
    user: int,
    selection: Selection = Proportion(0.1),
    universe: Sequence[int] | None = None,
    strict: bool = True,
) -> CandidateSet:
    """Rank items for ``user`` by CF click probability and keep a subset.

    ``universe`` lists the rankable item ids (default: the matrix items);
    items outside the matrix score 0. Proportion mode keeps the top
    ``ceil(q * len(universe))``; threshold mode keeps ``p > p_candidate``.
    Ties break by ascending item id. With ``strict`` False an unknown user
    is treated as having no purchases instead of raising.
    """
    ids = matrix.items if universe is None else np.asarray(sorted(set(int(i) for i in universe)), dtype=np.int64)
    if strict or matrix.has_user(user):
        probs = matrix.click_probs(user)
    else:
        probs = np.zeros(len(matrix.items))
    if universe is None:
        p = probs
    else:
        p = np.zeros(len(ids))
        for k, i in enumerate(ids):
            pos = matrix._item_index.get(int(i))
            if pos is not None:
                p[k] = probs[pos]
    # scores equal up to rounding noise count as ties, broken by id
    order = np.lexsort((ids, -np.round(p, 12)))
    if isinstance(selection, Threshold):
        order = order[p[order] > selection.p_candidate]
    else:
        order = order[: math.ceil(selection.q * len(ids) - 1e-9)]
    return CandidateSet(int(user), tuple(int(i) for i in ids[order]), tuple(float(v) for v in p[order]), selection)


def format_candidates(sets: Iterable[CandidateSet]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    for cs in sets:
        for rank, (item, score) in enumerate(zip(cs.items, cs.scores), start=1):
            w.writerow([cs.user_id, item, repr(score), rank])
    return out.getvalue()


class CandidateIndex:
    """Candidate sets refreshed once per simulated day from earlier purchases."""

    def __init__(
        self,
        transactional: Sequence[InteractionRecord],
        universe: Sequence[int],
        selection: Selection = Proportion(0.1),
        origin: int = 0,
        day_secs: int = 86400,
        k_neighbors: int | None = None,
    ):
        self.purchases = sorted(
            (r for r in transactional if r.behavior is Behavior.PURCHASE), key=lambda r: r.timestamp
        )
        self.universe = sorted(set(int(i) for i in universe))
        self.selection = selection
        self.origin = origin
        self.day_secs = day_secs
        self.k_neighbors = k_neighbors
        self._matrices: dict[int, InteractionMatrix] = {}
        self._sets: dict[tuple[int, int], CandidateSet] = {}

    def day_of(self, timestamp: int) -> int:
        return (timestamp - self.origin) // self.day_secs

    def matrix_for_day(self, day: int) -> InteractionMatrix:
        if day not in self._matrices:
            cutoff = self.origin + day * self.day_secs
            self._matrices[day] = build_matrix((r for r in self.purchases if r.timestamp < cutoff), self.k_neighbors)
        return self._matrices[day]

    def for_user(self, user: int, timestamp: int) -> CandidateSet:
        day = self.day_of(timestamp)
        key = (int(user), day)
        if key not in self._sets:
            self._sets[key] = candidate_set(self.matrix_for_day(day), user, self.selection, self.universe, strict=False)
        return self._sets[key]
