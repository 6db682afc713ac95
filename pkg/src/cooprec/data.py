"""Interaction log ingestion, sessionization and temporal partitioning.

Input rows follow the UserBehavior layout::

    user_id,item_id,category_id,behavior,timestamp

Clicks are the private, on-device signal. Purchases, cart additions and
favorites are transactional and always available to the cloud, so they are
never routed into a training stage; they are kept whole in
:attr:`DatasetSplit.transactional`.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np


class Behavior(enum.Enum):
    CLICK = "click"
    PURCHASE = "purchase"
    CART = "cart"
    FAVORITE = "favorite"

    @property
    def transactional(self) -> bool:
        return self is not Behavior.CLICK


DEFAULT_TOKENS: dict[str, Behavior] = {
    "pv": Behavior.CLICK,
    "buy": Behavior.PURCHASE,
    "cart": Behavior.CART,
    "fav": Behavior.FAVORITE,
}


class DataError(ValueError):
    pass


class MalformedRowError(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnknownBehaviorError(DataError):
    def __init__(self, token: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"UnknownBehavior({token!r}){where}")
        self.token = token
        self.line = line


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    category_id: int
    behavior: Behavior
    timestamp: int

    def __post_init__(self):
        if self.user_id < 0 or self.item_id < 0 or self.category_id < 0:
            raise DataError(f"negative id in {self}")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp in {self}")


class Click(NamedTuple):
    item_id: int
    timestamp: int
    category_id: int = 0


@dataclass(frozen=True)
class Session:
    user_id: int
    clicks: tuple[Click, ...]

    def __len__(self) -> int:
        return len(self.clicks)

    @property
    def items(self) -> list[int]:
        return [c.item_id for c in self.clicks]

    @property
    def start(self) -> int:
        return self.clicks[0].timestamp


@dataclass(frozen=True)
class PartitionConfig:
    t_device: int
    t_test: int
    idle_threshold_secs: int = 706
    min_user_clicks: int = 12
    new_user_quantile: float = 0.9
    # "user": drop users with fewer total clicks; "session": drop short sessions
    min_clicks_mode: str = "user"

    def __post_init__(self):
        if not self.t_device < self.t_test:
            raise ValueError("t_device must be earlier than t_test")
        if self.idle_threshold_secs <= 0:
            raise ValueError("idle_threshold_secs must be positive")
        if not 0.0 <= self.new_user_quantile <= 1.0:
            raise ValueError("new_user_quantile must lie in [0, 1]")
        if self.min_clicks_mode not in ("user", "session"):
            raise ValueError(f"unknown min_clicks_mode {self.min_clicks_mode!r}")


@dataclass
class DatasetSplit:
    global_train: list[Session]
    personal_train: dict[int, list[Session]]
    test: dict[int, list[Session]]
    transactional: list[InteractionRecord]
    dropped: dict[str, int] = field(default_factory=dict)

    def stage_sessions(self, stage: str) -> list[Session]:
        if stage == "global":
            return list(self.global_train)
        table = {"personal": self.personal_train, "test": self.test}[stage]
        return [s for uid in sorted(table) for s in table[uid]]

    def click_counts(self) -> dict[str, int]:
        return {
            stage: sum(len(s) for s in self.stage_sessions(stage))
            for stage in ("global", "personal", "test")
        }

    def train_items(self) -> set[int]:
        items = set()
        for stage in ("global", "personal"):
            for s in self.stage_sessions(stage):
                items.update(s.items)
        return items

    def users(self) -> list[int]:
        us = {s.user_id for s in self.global_train}
        us.update(self.personal_train)
        us.update(self.test)
        return sorted(us)

    @property
    def is_empty(self) -> bool:
        return not any(self.click_counts().values())


# -- parsing -----------------------------------------------------------------


def _text_lines(source) -> Iterator[str]:
    if isinstance(source, (bytes, bytearray)):
        source = io.StringIO(bytes(source).decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    elif isinstance(source, io.BufferedIOBase) or "b" in getattr(source, "mode", ""):
        source = io.TextIOWrapper(source, encoding="utf-8", newline="")
    yield from source


def parse_interactions(
    source: bytes | str | IO,
    tokens: Mapping[str, Behavior] = DEFAULT_TOKENS,
) -> list[InteractionRecord]:
    """Parse headerless UserBehavior CSV rows, preserving input order.

    ``source`` may be raw bytes, text, or an open (binary or text) stream.
    Blank lines are skipped.
    """
    records = []
    for lineno, row in enumerate(csv.reader(_text_lines(source)), start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 5:
            raise MalformedRowError(lineno, f"expected 5 columns, got {len(row)}")
        token = row[3].strip()
        if token not in tokens:
            raise UnknownBehaviorError(token, lineno)
        try:
            user, item, cat, ts = (int(row[i]) for i in (0, 1, 2, 4))
        except ValueError as exc:
            raise MalformedRowError(lineno, str(exc)) from None
        try:
            records.append(InteractionRecord(user, item, cat, tokens[token], ts))
        except DataError as exc:
            raise MalformedRowError(lineno, str(exc)) from None
    return records


def read_interactions(path: str | os.PathLike, tokens=DEFAULT_TOKENS) -> list[InteractionRecord]:
    with open(path, "rb") as fh:
        return parse_interactions(fh.read(), tokens)


def format_interactions(records: Iterable[InteractionRecord], tokens=DEFAULT_TOKENS) -> str:
    reverse = {b: t for t, b in tokens.items()}
    out = io.StringIO()
    for r in records:
        out.write(f"{r.user_id},{r.item_id},{r.category_id},{reverse[r.behavior]},{r.timestamp}\n")
    return out.getvalue()


# -- sessions ----------------------------------------------------------------


def sessionize(records: Sequence[InteractionRecord], idle_threshold_secs: int) -> list[Session]:
    """Split one user's clicks wherever the idle gap exceeds the threshold.

    A gap exactly equal to the threshold keeps the clicks together.
    """
    if not records:
        return []
    users = {r.user_id for r in records}
    if len(users) != 1:
        raise DataError(f"sessionize expects one user, got {sorted(users)}")
    (user,) = users
    ordered = sorted(records, key=lambda r: r.timestamp)
    sessions, current = [], [ordered[0]]
    for prev, rec in zip(ordered, ordered[1:]):
        if rec.timestamp - prev.timestamp > idle_threshold_secs:
            sessions.append(current)
            current = []
        current.append(rec)
    sessions.append(current)
    return [
        Session(user, tuple(Click(r.item_id, r.timestamp, r.category_id) for r in s))
        for s in sessions
    ]


def _resplit(session: Session, idle_threshold_secs: int) -> list[Session]:
    out, current = [], [session.clicks[0]]
    for prev, c in zip(session.clicks, session.clicks[1:]):
        if c.timestamp - prev.timestamp > idle_threshold_secs:
            out.append(Session(session.user_id, tuple(current)))
            current = []
        current.append(c)
    out.append(Session(session.user_id, tuple(current)))
    return out


def _cut(session: Session, boundaries: Sequence[int]) -> list[tuple[int, Session]]:
    """Cut a session at stage boundaries; returns (stage index, piece) pairs."""
    pieces: dict[int, list[Click]] = defaultdict(list)
    for c in session.clicks:
        stage = int(np.searchsorted(boundaries, c.timestamp, side="right"))
        pieces[stage].append(c)
    return [(k, Session(session.user_id, tuple(v))) for k, v in sorted(pieces.items())]


def _clicks_by_user(records: Iterable[InteractionRecord]) -> dict[int, list[InteractionRecord]]:
    by_user: dict[int, list[InteractionRecord]] = defaultdict(list)
    for r in records:
        if r.behavior is Behavior.CLICK:
            by_user[r.user_id].append(r)
    return by_user


def partition_temporal(records: Sequence[InteractionRecord], cfg: PartitionConfig) -> DatasetSplit:
    """Route clicks into the global, personal and test stages.

    Stages are the half-open intervals ``[-inf, t_device)``,
    ``[t_device, t_test)`` and ``[t_test, inf)``. A session crossing a
    boundary is cut there. Transactional records are kept whole.
    """
    boundaries = [cfg.t_device, cfg.t_test]
    global_train: list[Session] = []
    personal: dict[int, list[Session]] = defaultdict(list)
    test: dict[int, list[Session]] = defaultdict(list)
    by_user = _clicks_by_user(records)
    for user in sorted(by_user):
        for session in sessionize(by_user[user], cfg.idle_threshold_secs):
            for stage, piece in _cut(session, boundaries):
                if stage == 0:
                    global_train.append(piece)
                elif stage == 1:
                    personal[user].append(piece)
                else:
                    test[user].append(piece)
    transactional = [r for r in records if r.behavior.transactional]
    return DatasetSplit(global_train, dict(personal), dict(test), transactional)


def filter_dataset(split: DatasetSplit, cfg: PartitionConfig) -> DatasetSplit:
    """Apply the session, user and unseen-item filters.

    Order: length-1 sessions, then the minimum-click rule, then test clicks
    on items absent from training. Removing a test click can open an idle
    gap, so the affected test session is re-split and length-checked again.
    Counts of removed clicks are recorded in ``dropped``.
    """
    dropped = dict(split.dropped)

    def bump(reason, n):
        dropped[reason] = dropped.get(reason, 0) + n

    def keep_long(sessions, min_len=2, reason="short_sessions"):
        kept = []
        for s in sessions:
            if len(s) >= min_len:
                kept.append(s)
            else:
                bump(reason, len(s))
        return kept

    glob = keep_long(split.global_train)
    personal = {u: keep_long(ss) for u, ss in split.personal_train.items()}
    test = {u: keep_long(ss) for u, ss in split.test.items()}

    if cfg.min_clicks_mode == "session":
        glob = keep_long(glob, cfg.min_user_clicks, "min_clicks")
        personal = {u: keep_long(ss, cfg.min_user_clicks, "min_clicks") for u, ss in personal.items()}
        test = {u: keep_long(ss, cfg.min_user_clicks, "min_clicks") for u, ss in test.items()}
    else:
        totals: dict[int, int] = defaultdict(int)
        for s in glob:
            totals[s.user_id] += len(s)
        for table in (personal, test):
            for u, ss in table.items():
                totals[u] += sum(len(s) for s in ss)
        weak = {u for u, n in totals.items() if n < cfg.min_user_clicks}
        bump("min_clicks", sum(totals[u] for u in weak))
        glob = [s for s in glob if s.user_id not in weak]
        personal = {u: ss for u, ss in personal.items() if u not in weak}
        test = {u: ss for u, ss in test.items() if u not in weak}

    vocab = {c.item_id for s in glob for c in s.clicks}
    vocab.update(c.item_id for ss in personal.values() for s in ss for c in s.clicks)
    new_test: dict[int, list[Session]] = {}
    for u, ss in test.items():
        kept = []
        for s in ss:
            clicks = tuple(c for c in s.clicks if c.item_id in vocab)
            bump("unseen_test_items", len(s) - len(clicks))
            if clicks:
                kept.extend(_resplit(Session(u, clicks), cfg.idle_threshold_secs))
        new_test[u] = keep_long(kept)

    personal = {u: ss for u, ss in personal.items() if ss}
    new_test = {u: ss for u, ss in new_test.items() if ss}
    return DatasetSplit(glob, personal, new_test, list(split.transactional), dropped)


def build_split(records: Sequence[InteractionRecord], cfg: PartitionConfig) -> DatasetSplit:
    return filter_dataset(partition_temporal(records, cfg), cfg)


def split_users(records: Iterable[InteractionRecord], quantile_threshold: float = 0.9) -> tuple[set[int], set[int]]:
    """Old/new cohort split by each user's mean click time.

    Users whose mean lies strictly above the given (linearly interpolated)
    quantile of all per-user means are new; ties stay old.
    """
    by_user = _clicks_by_user(records)
    if not by_user:
        return set(), set()
    users = sorted(by_user)
    means = np.array([np.mean([r.timestamp for r in by_user[u]]) for u in users], dtype=np.float64)
    cut = np.quantile(means, quantile_threshold)
    new = {u for u, m in zip(users, means) if m > cut}
    return set(users) - new, new


# -- persistence -------------------------------------------------------------

STAGE_FILES = {"global": "global.csv", "personal": "personal.csv", "test": "test.csv"}


def _session_rows(sessions: Iterable[Session], tokens=DEFAULT_TOKENS) -> str:
    click = {b: t for t, b in tokens.items()}[Behavior.CLICK]
    return "".join(
        f"{s.user_id},{c.item_id},{c.category_id},{click},{c.timestamp}\n" for s in sessions for c in s.clicks
    )


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_split(split: DatasetSplit, out_dir: str | os.PathLike, cfg: PartitionConfig) -> dict:
    """Persist one CSV per stage plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for stage, name in STAGE_FILES.items():
        (out / name).write_text(_session_rows(split.stage_sessions(stage)), encoding="utf-8", newline="\n")
        files[stage] = name
    (out / "transactional.csv").write_text(format_interactions(split.transactional), encoding="utf-8", newline="\n")
    files["transactional"] = "transactional.csv"
    counts = split.click_counts()
    counts["transactional"] = len(split.transactional)
    counts["users"] = len(split.users())
    manifest = {
        "config": asdict(cfg),
        "counts": counts,
        "dropped": dict(sorted(split.dropped.items())),
        "files": files,
        "sha256": {stage: sha256_file(out / name) for stage, name in files.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_split(in_dir: str | os.PathLike) -> tuple[DatasetSplit, PartitionConfig]:
    """Load a split written by :func:`write_split`.

    Stage files hold already-filtered sessions; they are re-sessionized with
    the stored idle threshold, which reproduces the written sessions.
    """
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    cfg = PartitionConfig(**manifest["config"])
    stages = {}
    for stage, name in STAGE_FILES.items():
        by_user = _clicks_by_user(read_interactions(src / name))
        stages[stage] = {u: sessionize(by_user[u], cfg.idle_threshold_secs) for u in sorted(by_user)}
    glob = [s for u in sorted(stages["global"]) for s in stages["global"][u]]
    split = DatasetSplit(
        glob,
        stages["personal"],
        stages["test"],
        read_interactions(src / "transactional.csv"),
        dict(manifest.get("dropped", {})),
    )
    return split, cfg


def restrict_users(split: DatasetSplit, users: set[int]) -> DatasetSplit:
    return replace(
        split,
        global_train=[s for s in split.global_train if s.user_id in users],
        personal_train={u: ss for u, ss in split.personal_train.items() if u in users},
        test={u: ss for u, ss in split.test.items() if u in users},
    )
