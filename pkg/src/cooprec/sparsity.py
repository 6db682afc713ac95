"""Lasso truncation of embeddings and gradual magnitude pruning of weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from cooprec.nn import Param


@dataclass(frozen=True)
class LassoConfig:
    gamma: float = 0.0
    lambda_lasso: float = 0.0
    # when set, gamma is recalibrated during training to hit this zero fraction
    target_sparsity: float | None = None

    def __post_init__(self):
        for name in ("gamma", "lambda_lasso"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.target_sparsity is not None and not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in [0, 1)")


def lasso_truncate(embedding: np.ndarray, gamma: float) -> tuple[np.ndarray, float]:
    """Zero every coordinate with ``|E_i| <= gamma``; penalty is the L1 norm of the rest."""
    e = np.asarray(embedding, dtype=np.float64)
    kept = np.where(np.abs(e) > gamma, e, 0.0)
    return kept, float(np.abs(kept).sum())


def lasso_backward(upstream: np.ndarray, embedding: np.ndarray, gamma: float, lambda_lasso: float) -> np.ndarray:
    """Straight-through gradient on survivors plus the L1 subgradient.

    Truncated coordinates get 0, including the kink ``|E_i| == gamma``.
    """
    e = np.asarray(embedding, dtype=np.float64)
    alive = np.abs(e) > gamma
    return np.where(alive, upstream + lambda_lasso * np.sign(e), 0.0)


def gamma_for_sparsity(values: np.ndarray, target: float) -> float:
    """Smallest observed magnitude that leaves at most ``1 - target`` of entries above it."""
    mags = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    if mags.size == 0 or target <= 0.0:
        return 0.0
    return float(np.quantile(mags, target, method="higher"))


@dataclass(frozen=True)
class PruningSchedule:
    s_i: float = 0.0
    s_f: float = 0.9
    t0: int = 1
    delta_t: int = 1
    n: int = 1

    def __post_init__(self):
        if not 0.0 <= self.s_i <= self.s_f < 1.0:
            raise ValueError("need 0 <= s_i <= s_f < 1")
        if self.delta_t < 1 or self.n < 1:
            raise ValueError("delta_t and n must be at least 1")

    @classmethod
    def for_epochs(cls, epochs: int, s_f: float = 0.9, s_i: float = 0.0) -> "PruningSchedule":
        """Prune from epoch 1 and reach ``s_f`` at the last epoch."""
        return cls(s_i=s_i, s_f=s_f, t0=1, delta_t=1, n=max(1, epochs - 1))

    @property
    def end(self) -> int:
        return self.t0 + self.n * self.delta_t

    def is_step(self, t: int) -> bool:
        return self.t0 <= t <= self.end and (t - self.t0) % self.delta_t == 0


def agp_sparsity_at(schedule: PruningSchedule, t: int) -> float:
    """Cubic sparsity ramp from ``s_i`` at ``t0`` to ``s_f`` after ``n`` steps."""
    if t < schedule.t0:
        raise ValueError(f"pruning starts at epoch {schedule.t0}, asked for {t}")
    if t >= schedule.end:
        return schedule.s_f
    frac = 1.0 - (t - schedule.t0) / (schedule.n * schedule.delta_t)
    return schedule.s_f + (schedule.s_i - schedule.s_f) * frac**3


def apply_magnitude_prune(params: Iterable[Param], target_sparsity: float) -> dict[str, float]:
    """Mask the smallest-magnitude active weights of each prunable tensor.

    Every tensor is pruned on its own to ``ceil(target * size)`` zeros. Masks
    only ever gain zeros, so a lower target than already reached is a no-op.
    Returns the achieved sparsity per tensor.
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError("target_sparsity must lie in [0, 1)")
    achieved = {}
    for p in params:
        if not p.prunable:
            continue
        want = math.ceil(target_sparsity * p.size - 1e-9)
        have = p.size - int(np.count_nonzero(p.mask))
        if want > have:
            flat_mask = p.mask.reshape(-1)
            active = np.flatnonzero(flat_mask)
            order = np.argsort(np.abs(p.values.reshape(-1)[active]), kind="stable")
            flat_mask[active[order[: want - have]]] = False
            p.apply_mask()
        achieved[p.name] = p.sparsity()
    return achieved
