"""Training/evaluation harness and the approach comparison matrix.

Four approaches share one test set and one candidate universe:

``global+personal``  global model on every pre-``t_test`` click, then per-user
                     fine-tuning on ``[t_device, t_test)`` (uploads private
                     clicks, so it is an upper bound, not a deployable option)
``cooperative``      global model on pre-``t_device`` clicks, per-user
                     fine-tuning on ``[t_device, t_test)``
``only-global``      global model on every pre-``t_test`` click
``only-personal``    a fresh model per user, fine-tuned on that user's own
                     pre-``t_test`` clicks
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from cooprec.candidates import CandidateIndex, Proportion
from cooprec.data import (
    Behavior,
    DatasetSplit,
    InteractionRecord,
    PartitionConfig,
    Session,
    build_split,
    partition_temporal,
    split_users,
)
from cooprec.metrics import RankedPrediction, mrr_at_k, recall_at_k
from cooprec.model import Mode, ModelConfig, RecModel, Vocabulary, build_model, fine_tune, train_global
from cooprec.sparsity import LassoConfig, PruningSchedule

log = logging.getLogger(__name__)

APPROACHES = ("global+personal", "cooperative", "only-global", "only-personal")


@dataclass(frozen=True)
class TrainConfig:
    embedding_dim: int = 32
    hidden_dim: int = 100
    gru_layers: int = 1
    batch_size: int = 50
    learning_rate: float = 0.01
    mode: Mode = Mode.PULL
    lasso: LassoConfig = field(default_factory=LassoConfig)
    model_sparsity: float = 0.0
    prune_embedding: bool = True
    global_epochs: int = 10
    personal_steps: int = 3
    personal_learning_rate: float | None = None
    personal_initial_accumulator: float = 0.0
    personal_scope: str | None = None
    update_batch_size: int = 5
    candidate_proportion: float | None = 0.1
    k_neighbors: int | None = 30
    k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if isinstance(self.lasso, dict):
            object.__setattr__(self, "lasso", LassoConfig(**self.lasso))

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            embedding_dim=self.embedding_dim,
            gru_layers=self.gru_layers,
            hidden_dim=self.hidden_dim,
            batch_size=self.batch_size,
            mode=self.mode,
            lasso=self.lasso,
            learning_rate=self.learning_rate,
            prune_embedding=self.prune_embedding,
        )

    def schedule(self) -> PruningSchedule | None:
        if self.model_sparsity <= 0:
            return None
        return PruningSchedule.for_epochs(self.global_epochs, self.model_sparsity)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def session_order(sessions: Iterable[Session]) -> list[Session]:
    """Canonical training order, so equal session sets train identically."""
    return sorted(sessions, key=lambda s: (s.start, s.user_id, s.items))


def split_click_records(split: DatasetSplit) -> list[InteractionRecord]:
    sessions = split.stage_sessions("global") + split.stage_sessions("personal") + split.stage_sessions("test")
    return [
        InteractionRecord(s.user_id, c.item_id, c.category_id, Behavior.CLICK, c.timestamp)
        for s in sessions
        for c in s.clicks
    ]


def encode_sessions(sessions: Iterable[Session], vocab: Vocabulary) -> list[list[int]]:
    out = []
    for s in sessions:
        idx = vocab.encode_known(s.items)
        if len(idx) >= 2:
            out.append(idx.tolist())
    return out


@dataclass
class Evaluation:
    predictions: dict[int, list[RankedPrediction]]
    k: int = 20

    def all(self) -> list[RankedPrediction]:
        return [p for u in sorted(self.predictions) for p in self.predictions[u]]

    def recall(self, users: Iterable[int] | None = None) -> float:
        return recall_at_k(self._select(users), self.k)

    def mrr(self, users: Iterable[int] | None = None) -> float:
        return mrr_at_k(self._select(users), self.k)

    def _select(self, users):
        if users is None:
            return self.all()
        users = set(users)
        return [p for u in sorted(self.predictions) if u in users for p in self.predictions[u]]

    def per_user(self) -> dict[int, dict[str, float]]:
        return {
            u: {"recall": recall_at_k(ps, self.k), "mrr": mrr_at_k(ps, self.k), "n": len(ps)}
            for u, ps in sorted(self.predictions.items())
            if ps
        }


class Scorer:
    """Turns a user's model plus test sessions into ranked predictions."""

    def __init__(self, vocab: Vocabulary, candidates: CandidateIndex | None, k: int = 20):
        self.vocab = vocab
        self.candidates = candidates
        self.k = k

    def candidate_indices(self, user: int, timestamp: int) -> tuple[np.ndarray, np.ndarray]:
        if self.candidates is None:
            return self.vocab.ids, np.arange(len(self.vocab))
        ids = np.asarray(self.candidates.for_user(user, timestamp).items, dtype=np.int64)
        return ids, self.vocab.encode_known(ids)

    def rank(self, model: RecModel, user_vector: np.ndarray, user: int, timestamp: int, truth: int) -> RankedPrediction:
        ids, idx = self.candidate_indices(user, timestamp)
        return RankedPrediction.from_scores(model.score(user_vector, idx), ids, truth, depth=self.k)

    def session_predictions(self, model: RecModel, session: Session) -> list[RankedPrediction]:
        items = session.items
        vectors = model.session_embeddings(self.vocab.encode(items))
        return [
            self.rank(model, vectors[t], session.user_id, session.clicks[t].timestamp, items[t + 1])
            for t in range(len(items) - 1)
        ]


def evaluate(
    model_for: Callable[[int], RecModel], test: Mapping[int, Sequence[Session]], scorer: Scorer
) -> Evaluation:
    preds = {}
    for user in sorted(test):
        model = model_for(user)
        preds[user] = [p for s in test[user] for p in scorer.session_predictions(model, s)]
    return Evaluation(preds, scorer.k)


@dataclass
class Workspace:
    """A filtered split plus everything derived from it that approaches share."""

    split: DatasetSplit
    partition: PartitionConfig
    vocab: Vocabulary
    scorer: Scorer
    old_users: set[int]
    new_users: set[int]

    @classmethod
    def build(
        cls,
        records: Sequence[InteractionRecord],
        partition: PartitionConfig,
        train: TrainConfig,
    ) -> "Workspace":
        split = build_split(records, partition)
        return cls.from_split(split, partition, train, split_users(records, partition.new_user_quantile))

    @classmethod
    def from_split(
        cls,
        split: DatasetSplit,
        partition: PartitionConfig,
        train: TrainConfig,
        cohorts: tuple[set[int], set[int]] | None = None,
    ) -> "Workspace":
        """Workspace over an existing split; cohorts default to the split's own clicks."""
        if not split.test:
            raise ValueError("no test sessions survive filtering")
        vocab = Vocabulary(split.train_items())
        if cohorts is None:
            cohorts = split_users(split_click_records(split), partition.new_user_quantile)
        ws = cls(split, partition, vocab, Scorer(vocab, None, train.k), *cohorts)
        return ws.with_candidates(train.candidate_proportion, train)

    def with_candidates(self, proportion: float | None, train: TrainConfig) -> "Workspace":
        candidates = None
        if proportion is not None:
            candidates = CandidateIndex(
                self.split.transactional,
                self.vocab.ids,
                Proportion(proportion),
                origin=self.partition.t_test,
                k_neighbors=train.k_neighbors,
            )
        return replace(self, scorer=Scorer(self.vocab, candidates, train.k))

    def global_sessions(self, through_test: bool) -> list[list[int]]:
        sessions = list(self.split.global_train)
        if through_test:
            sessions += [s for u in self.split.personal_train for s in self.split.personal_train[u]]
        return encode_sessions(session_order(sessions), self.vocab)

    def personal_sessions(self, user: int, include_global: bool = False) -> list[list[int]]:
        sessions = list(self.split.personal_train.get(user, []))
        if include_global:
            sessions += [s for s in self.split.global_train if s.user_id == user]
        return encode_sessions(session_order(sessions), self.vocab)


def train_cloud_model(ws: Workspace, train: TrainConfig, seed: int, through_test: bool = False) -> RecModel:
    """Global model; with no global-stage data the fresh initialization is returned."""
    model = build_model(train.model_config(len(ws.vocab)), seed)
    sessions = ws.global_sessions(through_test)
    if sessions:
        train_global(model, sessions, train.global_epochs, schedule=train.schedule(), seed=seed)
    return model


def personalize(ws: Workspace, base: RecModel, train: TrainConfig, include_global: bool = False):
    def model_for(user: int) -> RecModel:
        return fine_tune(
            base,
            ws.personal_sessions(user, include_global),
            steps=train.personal_steps,
            update_batch_size=train.update_batch_size,
            learning_rate=train.personal_learning_rate,
            initial_accumulator=train.personal_initial_accumulator,
            scope=train.personal_scope,
        )

    return model_for


def run_approaches(
    ws: Workspace, train: TrainConfig, seed: int, approaches: Sequence[str] = APPROACHES
) -> dict[str, Evaluation]:
    results = {}
    need_full = {"global+personal", "only-global"} & set(approaches)
    full = train_cloud_model(ws, train, seed, through_test=True) if need_full else None
    for name in approaches:
        if name == "global+personal":
            model_for = personalize(ws, full, train)
        elif name == "cooperative":
            model_for = personalize(ws, train_cloud_model(ws, train, seed), train)
        elif name == "only-global":
            model_for = lambda user, m=full: m  # noqa: E731
        elif name == "only-personal":
            fresh = build_model(train.model_config(len(ws.vocab)), seed)
            model_for = personalize(ws, fresh, train, include_global=True)
        else:
            raise ValueError(f"unknown approach {name!r}")
        results[name] = evaluate(model_for, ws.split.test, ws.scorer)
        log.info("%s recall@%d=%.4f", name, train.k, results[name].recall())
    return results


def run_experiment_matrix(
    records: Sequence[InteractionRecord],
    partition: PartitionConfig,
    train: TrainConfig,
    seed: int,
    approaches: Sequence[str] = APPROACHES,
) -> dict[str, dict[str, float]]:
    """Recall@K and MRR@K per approach on identical test data."""
    ws = Workspace.build(records, partition, train)
    evals = run_approaches(ws, train, seed, approaches)
    return {name: {"recall": ev.recall(), "mrr": ev.mrr(), "n": len(ev.all())} for name, ev in evals.items()}


# -- ablations ---------------------------------------------------------------


def cooperative_eval(ws: Workspace, train: TrainConfig, seed: int) -> Evaluation:
    return run_approaches(ws, train, seed, ("cooperative",))["cooperative"]


def t_device_sweep(
    records: Sequence[InteractionRecord],
    partition: PartitionConfig,
    train: TrainConfig,
    seed: int,
    t_devices: Sequence[int],
) -> dict[int, dict[str, float]]:
    """Cooperative accuracy as the cloud/device cutoff moves."""
    out = {}
    for t in t_devices:
        ws = Workspace.build(records, replace(partition, t_device=t), train)
        ev = cooperative_eval(ws, train, seed)
        out[t] = {"recall": ev.recall(), "mrr": ev.mrr()}
    return out


def cohort_breakdown(ws: Workspace, ev: Evaluation) -> dict[str, dict[str, float]]:
    out = {}
    for name, users in (("old", ws.old_users), ("new", ws.new_users)):
        chosen = [u for u in ev.predictions if u in users and ev.predictions[u]]
        if chosen:
            out[name] = {"recall": ev.recall(chosen), "mrr": ev.mrr(chosen), "users": len(chosen)}
    return out


def update_interval_sweep(
    ws: Workspace, train: TrainConfig, seed: int, batch_sizes: Sequence[int] = (25, 50, 100, 200)
) -> dict[int, dict[str, float]]:
    base = train_cloud_model(ws, train, seed)
    out = {}
    for b in batch_sizes:
        cfg = replace(train, update_batch_size=b)
        ev = evaluate(personalize(ws, base, cfg), ws.split.test, ws.scorer)
        out[b] = {"recall": ev.recall(), "mrr": ev.mrr()}
    return out


def transactional_only(ws: Workspace, train: TrainConfig, seed: int) -> Evaluation:
    """Cooperative pipeline trained on purchase sequences, tested on clicks."""
    purchases = [
        InteractionRecord(r.user_id, r.item_id, r.category_id, Behavior.CLICK, r.timestamp)
        for r in ws.split.transactional
        if r.behavior is Behavior.PURCHASE
    ]
    p_split = partition_temporal(purchases, ws.partition)
    p_split = replace(
        p_split,
        global_train=[s for s in p_split.global_train if len(s) >= 2],
        personal_train={u: [s for s in ss if len(s) >= 2] for u, ss in p_split.personal_train.items()},
        test={},
    )
    tws = replace(ws, split=replace(p_split, test=ws.split.test, transactional=ws.split.transactional))
    return cooperative_eval(tws, train, seed)


# -- reporting ---------------------------------------------------------------


def records_digest(records: Iterable[InteractionRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.user_id},{r.item_id},{r.category_id},{r.behavior.value},{r.timestamp}\n".encode())
    return h.hexdigest()


def matrix_csv(table: Mapping[str, Mapping[str, float]], k: int = 20) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["approach", "metric", "value"])
    for name, row in table.items():
        w.writerow([name, f"recall@{k}", repr(row["recall"])])
        w.writerow([name, f"mrr@{k}", repr(row["mrr"])])
    return out.getvalue()


def matrix_bundle(table, partition: PartitionConfig, train: TrainConfig, seed: int, data_hash: str) -> str:
    return json.dumps(
        {
            "results": table,
            "partition": asdict(partition),
            "train": train.to_dict(),
            "seed": seed,
            "data_sha256": data_hash,
        },
        indent=2,
        sort_keys=True,
    )
