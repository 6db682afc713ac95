"""Synthetic click/purchase logs with planted global and per-user structure.

Items are grouped into categories and a sparse global Markov chain gives
every category a few successor categories. Each user privately prefers one
of those successors per category. The next category comes from the user's
preferred successor with probability ``alpha`` and from the shared chain
otherwise.

Inside a category the item is one of the user's own favorite items with
probability ``item_affinity`` and otherwise comes from a Zipf popularity
profile shared by everyone. A click turns into a purchase with probability
``purchase_prob``, or ``favorite_purchase_prob`` on a favorite item, so the
purchase log that feeds item-based CF carries the same per-user taste.
Cart and favorite events are sprinkled on top.

The category-level preference can largely be inferred from the session
itself, so a shared model already captures most of it. The favorite items
cannot: they differ per user and only show up in that user's history. A
model fine-tuned on one user's clicks picks them up, while a model trained
from scratch on those few clicks misses the shared chain and popularity.
Timestamps cover nine days from 2017-11-25 00:00 UTC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cooprec.data import Behavior, InteractionRecord

DAY = 86400
ORIGIN = 1511539200  # 2017-11-25 00:00 UTC
T_DEVICE = ORIGIN + 6 * DAY  # 2017-12-01
T_TEST = ORIGIN + 8 * DAY  # 2017-12-03


@dataclass
class SyntheticConfig:
    users: int = 200
    items: int = 500
    categories: int = 20
    days: int = 9
    alpha: float = 0.6
    global_successors: int = 4
    favorite_categories: int = 0
    item_affinity: float = 0.55
    favorite_items: int = 2
    zipf_exponent: float = 2.5
    sessions_per_day: float = 2.0
    mean_session_length: float = 7.0
    purchase_prob: float = 0.15
    # purchase chance for clicks on the user's favorite items; None means purchase_prob
    favorite_purchase_prob: float | None = 0.8
    side_event_prob: float = 0.03
    new_user_fraction: float = 0.1
    origin: int = ORIGIN

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.items < self.categories or self.categories < self.global_successors:
            raise ValueError("need items >= categories >= global_successors")


@dataclass
class SyntheticData:
    records: list[InteractionRecord]
    config: SyntheticConfig
    seed: int
    item_category: np.ndarray
    global_chain: np.ndarray
    successors: np.ndarray
    private_next: dict[int, np.ndarray] = field(default_factory=dict)
    favorites: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def t_device(self) -> int:
        return self.config.origin + 6 * DAY

    @property
    def t_test(self) -> int:
        return self.config.origin + 8 * DAY


def generate(cfg: SyntheticConfig | None = None, seed: int = 0) -> SyntheticData:
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(seed)
    C, M = cfg.categories, cfg.items

    item_category = np.sort(np.arange(M) % C)
    rng.shuffle(item_category)
    members = [np.flatnonzero(item_category == c) for c in range(C)]
    popularity = []
    for c in range(C):
        ranks = rng.permutation(len(members[c])) + 1
        w = ranks.astype(float) ** -cfg.zipf_exponent
        popularity.append(w / w.sum())

    successors = np.array([rng.choice(C, size=cfg.global_successors, replace=False) for _ in range(C)])
    chain = np.zeros((C, C))
    for c in range(C):
        chain[c, successors[c]] = rng.dirichlet(np.full(cfg.global_successors, 4.0))

    n_new = int(round(cfg.new_user_fraction * cfg.users))
    fav_buy = cfg.purchase_prob if cfg.favorite_purchase_prob is None else cfg.favorite_purchase_prob
    records: list[InteractionRecord] = []
    private_next = {}
    user_favorites = {}
    for user in range(cfg.users):
        nxt = successors[np.arange(C), rng.integers(0, cfg.global_successors, size=C)]
        favs = rng.choice(C, size=cfg.favorite_categories, replace=False) if cfg.favorite_categories else None
        private_next[user] = nxt
        favorites = [rng.choice(members[c], size=min(cfg.favorite_items, len(members[c])), replace=False) for c in range(C)]
        user_favorites[user] = np.concatenate(favorites)
        first_day = 6 if user >= cfg.users - n_new else 0

        def next_category(c):
            if rng.random() < cfg.alpha:
                if favs is not None:
                    return int(rng.choice(favs))
                return int(nxt[c])
            return int(rng.choice(C, p=chain[c]))

        for day in range(first_day, cfg.days):
            slots = np.arange(8 * 3600, 22 * 3600, 2 * 3600)
            n_sessions = min(int(rng.poisson(cfg.sessions_per_day)), len(slots))
            day_start = cfg.origin + day * DAY
            starts = np.sort(rng.choice(slots, size=n_sessions, replace=False))
            for start in starts:
                length = min(2 + int(rng.poisson(cfg.mean_session_length - 2)), 20)
                t = int(day_start + start + rng.integers(0, 600))
                cat = int(rng.integers(C))
                for _ in range(length):
                    favorite = rng.random() < cfg.item_affinity
                    if favorite:
                        item = int(rng.choice(favorites[cat]))
                    else:
                        item = int(rng.choice(members[cat], p=popularity[cat]))
                    records.append(InteractionRecord(user, item, cat, Behavior.CLICK, t))
                    if rng.random() < (fav_buy if favorite else cfg.purchase_prob):
                        records.append(InteractionRecord(user, item, cat, Behavior.PURCHASE, t + 20))
                    if rng.random() < cfg.side_event_prob:
                        side = Behavior.CART if rng.random() < 0.5 else Behavior.FAVORITE
                        records.append(InteractionRecord(user, item, cat, side, t + 10))
                    t += int(rng.integers(15, 300))
                    cat = next_category(cat)
    records.sort(key=lambda r: (r.timestamp, r.user_id, r.behavior.value, r.item_id))
    return SyntheticData(records, cfg, seed, item_category, chain, successors, private_next, user_favorites)
