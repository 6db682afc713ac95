"""Top-K ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RankedPrediction:
    ranked: tuple[int, ...]  # descending score, ties by ascending id
    truth: int

    def __post_init__(self):
        if len(set(self.ranked)) != len(self.ranked):
            raise ValueError("duplicate ids in ranking")

    @classmethod
    def from_scores(cls, scores: np.ndarray, item_ids: Sequence[int], truth: int, depth: int | None = None):
        ids = np.asarray(item_ids, dtype=np.int64)
        order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
        if depth is not None:
            order = order[:depth]
        return cls(tuple(int(i) for i in ids[order]), int(truth))

    def rank(self) -> int | None:
        """1-based rank of the truth, None when it is not in the ranking."""
        try:
            return self.ranked.index(self.truth) + 1
        except ValueError:
            return None


def _ranks(predictions: Sequence[RankedPrediction]) -> list[int | None]:
    if not predictions:
        raise ValueError("no predictions to evaluate")
    return [p.rank() for p in predictions]


def recall_at_k(predictions: Sequence[RankedPrediction], k: int = 20) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    ranks = _ranks(predictions)
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def mrr_at_k(predictions: Sequence[RankedPrediction], k: int = 20) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    ranks = _ranks(predictions)
    return sum(1.0 / r for r in ranks if r is not None and r <= k) / len(ranks)


def summarize(predictions: Sequence[RankedPrediction], k: int = 20) -> dict[str, float]:
    return {f"recall@{k}": recall_at_k(predictions, k), f"mrr@{k}": mrr_at_k(predictions, k), "n": len(predictions)}
