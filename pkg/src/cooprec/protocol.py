"""Cloud/device message-passing simulation for the pull and push flows.

One cloud node trains the global model and owns the candidate filter. Each
user with data after the device cutoff gets a device node that downloads the
encoded global model once and fine-tunes it on local clicks. At test time:

pull  the device downloads its candidate set (ids plus item rows) once per
      day and ranks it locally; nothing flows device -> cloud.
push  the device uploads one sparse user embedding per test prefix and the
      cloud answers with a top-K id list scored by the global output head.

Every payload is real wire bytes from :mod:`cooprec.wire`; the byte totals in
the report are sums over the message log. The network is lossless and
instantaneous. Devices are processed in a fixed order, so a seed fully
determines the log and the report.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from cooprec.data import DatasetSplit, PartitionConfig, Session
from cooprec.experiments import TrainConfig, Workspace, train_cloud_model
from cooprec.metrics import RankedPrediction, mrr_at_k, recall_at_k
from cooprec.model import Mode, RecModel, fine_tune
from cooprec.sparsity import lasso_truncate
from cooprec.wire import decode_ids_at, decode_model, decode_sparse_at, encode_ids, encode_model, encode_sparse

CLOUD = "cloud"


class Kind(str, enum.Enum):
    GLOBAL_MODEL = "GlobalModel"
    CANDIDATE_SET_ITEMS = "CandidateSetItems"
    USER_EMBEDDING = "UserEmbedding"
    RECOMMENDATION_LIST = "RecommendationList"


UP, DOWN = "up", "down"

# (kind, direction) pairs each mode may carry
ALLOWED = {
    Mode.PULL: {(Kind.GLOBAL_MODEL, DOWN), (Kind.CANDIDATE_SET_ITEMS, DOWN)},
    Mode.PUSH: {(Kind.GLOBAL_MODEL, DOWN), (Kind.USER_EMBEDDING, UP), (Kind.RECOMMENDATION_LIST, DOWN)},
}


class ProtocolViolation(RuntimeError):
    pass


def device_id(user: int) -> str:
    return f"device:{user}"


@dataclass(frozen=True)
class Message:
    kind: Kind
    sender: str
    receiver: str
    payload: bytes = field(repr=False)

    @property
    def payload_bytes(self) -> int:
        return len(self.payload)

    @property
    def direction(self) -> str:
        if self.sender == CLOUD and self.receiver != CLOUD:
            return DOWN
        if self.receiver == CLOUD and self.sender != CLOUD:
            return UP
        raise ProtocolViolation(f"{self.sender} -> {self.receiver} is not a cloud/device link")

    def record(self) -> dict:
        return {"kind": self.kind.value, "from": self.sender, "to": self.receiver, "bytes": self.payload_bytes}


class MessageLog:
    """Append-only, totally ordered log that rejects messages illegal in its mode."""

    def __init__(self, mode: Mode):
        self.mode = Mode(mode)
        self.messages: list[Message] = []

    def send(self, msg: Message) -> Message:
        if (msg.kind, msg.direction) not in ALLOWED[self.mode]:
            raise ProtocolViolation(f"{msg.kind.value} {msg.direction} is not allowed in {self.mode.value} mode")
        self.messages.append(msg)
        return msg

    def __iter__(self) -> Iterator[Message]:
        return iter(self.messages)

    def __len__(self):
        return len(self.messages)

    def total(self, direction: str) -> int:
        return sum(m.payload_bytes for m in self.messages if m.direction == direction)

    def by_kind(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for m in self.messages:
            row = out.setdefault(m.kind.value, {"messages": 0, "bytes": 0})
            row["messages"] += 1
            row["bytes"] += m.payload_bytes
        return dict(sorted(out.items()))

    def ndjson(self) -> str:
        return "".join(json.dumps(m.record(), sort_keys=True) + "\n" for m in self.messages)


# -- payloads ----------------------------------------------------------------


def encode_candidate_items(model: RecModel, ids: np.ndarray, idx: np.ndarray) -> bytes:
    """Candidate ids followed by their truncated embedding rows and output rows."""
    emb = model.embedding.table.values[idx]
    if model.config.mode is Mode.PULL:
        emb = lasso_truncate(emb, model.gamma)[0]
    out_w = np.where(model.output.weight.mask, model.output.weight.values, 0.0)[:, idx].T
    return b"".join(
        [encode_ids(ids), encode_sparse(emb), encode_sparse(out_w), encode_sparse(model.output.bias.values[idx])]
    )


def decode_candidate_items(buf: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ids, pos = decode_ids_at(buf, 0)
    emb, pos = decode_sparse_at(buf, pos)
    out_w, pos = decode_sparse_at(buf, pos)
    bias, pos = decode_sparse_at(buf, pos)
    n = len(ids)
    return ids, emb.reshape(n, -1) if n else emb, out_w.reshape(n, -1) if n else out_w, bias


# -- actors ------------------------------------------------------------------


class Cloud:
    def __init__(self, ws: Workspace, model: RecModel, log: MessageLog, k: int):
        self.ws = ws
        self.model = model
        self.log = log
        self.k = k
        self._model_bytes = encode_model(model)

    def send_model(self, user: int):
        self.log.send(Message(Kind.GLOBAL_MODEL, CLOUD, device_id(user), self._model_bytes))

    def send_candidates(self, user: int, timestamp: int):
        ids, idx = self.ws.scorer.candidate_indices(user, timestamp)
        payload = encode_candidate_items(self.model, ids, idx)
        self.log.send(Message(Kind.CANDIDATE_SET_ITEMS, CLOUD, device_id(user), payload))

    def recommend(self, msg: Message, timestamp: int):
        """Score candidates against an uploaded embedding and reply with the top-K ids."""
        user = int(msg.sender.split(":", 1)[1])
        vector, end = decode_sparse_at(msg.payload, 0)
        if end != len(msg.payload):
            raise ProtocolViolation("UserEmbedding payload carries extra bytes")
        ids, idx = self.ws.scorer.candidate_indices(user, timestamp)
        scores = self.model.score(vector.astype(np.float64), idx)
        top = RankedPrediction.from_scores(scores, ids, truth=-1, depth=self.k).ranked
        self.log.send(Message(Kind.RECOMMENDATION_LIST, CLOUD, msg.sender, encode_ids(top)))


class Device:
    def __init__(self, user: int, log: MessageLog, k: int):
        self.user = user
        self.name = device_id(user)
        self.log = log
        self.k = k
        self.model: RecModel | None = None
        self._candidates: dict[int, np.ndarray] = {}

    def receive_model(self, msg: Message):
        self.model = decode_model(msg.payload)

    def fine_tune(self, sessions: Sequence[Sequence[int]], train: TrainConfig):
        self.model = fine_tune(
            self.model,
            sessions,
            steps=train.personal_steps,
            update_batch_size=train.update_batch_size,
            learning_rate=train.personal_learning_rate,
            initial_accumulator=train.personal_initial_accumulator,
            scope=train.personal_scope,
        )

    def has_candidates(self, day: int) -> bool:
        return day in self._candidates

    def receive_candidates(self, day: int, msg: Message):
        self._candidates[day] = decode_candidate_items(msg.payload)[0]

    def rank_locally(self, vector: np.ndarray, day: int, vocab, truth: int) -> RankedPrediction:
        ids = self._candidates[day]
        scores = self.model.score(vector, vocab.encode_known(ids))
        return RankedPrediction.from_scores(scores, ids, truth, depth=self.k)

    def upload_embedding(self, vector: np.ndarray) -> Message:
        return self.log.send(Message(Kind.USER_EMBEDDING, self.name, CLOUD, encode_sparse(vector)))


# -- simulation --------------------------------------------------------------


@dataclass
class SimulationReport:
    mode: str
    seed: int
    recall: float
    mrr: float
    instances: int
    per_user: dict[int, dict[str, float]]
    uploaded_bytes: int
    downloaded_bytes: int
    by_kind: dict[str, dict[str, int]]
    config: dict
    k: int = 20

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "k": self.k,
            f"recall@{self.k}": self.recall,
            f"mrr@{self.k}": self.mrr,
            "instances": self.instances,
            "per_user": {str(u): v for u, v in sorted(self.per_user.items())},
            "uploaded_bytes": self.uploaded_bytes,
            "downloaded_bytes": self.downloaded_bytes,
            "by_kind": self.by_kind,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class Simulation:
    report: SimulationReport
    log: MessageLog
    global_model: RecModel


def _test_events(test: dict[int, list[Session]]):
    """Every (prefix end, next click) pair across users, in time order."""
    heap = []
    for user in sorted(test):
        for s_pos, s in enumerate(test[user]):
            for t in range(len(s) - 1):
                heap.append((s.clicks[t].timestamp, user, s_pos, t))
    heapq.heapify(heap)
    while heap:
        yield heapq.heappop(heap)


def run_simulation(
    split: DatasetSplit,
    mode: Mode | str,
    partition: PartitionConfig,
    train: TrainConfig,
    seed: int,
) -> Simulation:
    """Run the cooperative flow for ``mode`` over a filtered split."""
    mode = Mode(mode)
    train = TrainConfig(**{**train.to_dict(), "mode": mode})
    ws = Workspace.from_split(split, partition, train)
    log = MessageLog(mode)
    cloud = Cloud(ws, train_cloud_model(ws, train, seed), log, train.k)

    users = sorted(set(split.personal_train) | set(split.test))
    devices = {}
    for user in users:
        dev = devices[user] = Device(user, log, train.k)
        cloud.send_model(user)
        dev.receive_model(log.messages[-1])
        dev.fine_tune(ws.personal_sessions(user), train)

    predictions: dict[int, list[RankedPrediction]] = {u: [] for u in sorted(split.test)}
    vectors: dict[tuple[int, int], np.ndarray] = {}
    for timestamp, user, s_pos, t in _test_events(split.test):
        dev = devices[user]
        session = split.test[user][s_pos]
        key = (user, s_pos)
        if key not in vectors:
            vectors[key] = dev.model.session_embeddings(ws.vocab.encode(session.items))
        vector = vectors[key][t]
        truth = session.items[t + 1]
        if mode is Mode.PULL:
            day = ws.scorer.candidates.day_of(timestamp) if ws.scorer.candidates else 0
            if not dev.has_candidates(day):
                cloud.send_candidates(user, timestamp)
                dev.receive_candidates(day, log.messages[-1])
            pred = dev.rank_locally(vector, day, ws.vocab, truth)
        else:
            cloud.recommend(dev.upload_embedding(vector), timestamp)
            ranked, _ = decode_ids_at(log.messages[-1].payload, 0)
            pred = RankedPrediction(tuple(int(i) for i in ranked), int(truth))
        predictions[user].append(pred)

    every = [p for u in sorted(predictions) for p in predictions[u]]
    per_user = {
        u: {"recall": recall_at_k(ps, train.k), "mrr": mrr_at_k(ps, train.k), "n": len(ps)}
        for u, ps in predictions.items()
        if ps
    }
    report = SimulationReport(
        mode=mode.value,
        seed=seed,
        recall=recall_at_k(every, train.k),
        mrr=mrr_at_k(every, train.k),
        instances=len(every),
        per_user=per_user,
        uploaded_bytes=log.total(UP),
        downloaded_bytes=log.total(DOWN),
        by_kind=log.by_kind(),
        config={"partition": asdict(partition), "train": train.to_dict(), "devices": len(users)},
        k=train.k,
    )
    return Simulation(report, log, cloud.model)

