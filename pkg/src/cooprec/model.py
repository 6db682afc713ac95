"""GRU next-click model with a mode-dependent Lasso sparsity layer.

Network: item index -> embedding -> GRU stack -> user embedding -> affine
scores over items. The sparsity layer sits after the embedding lookup in
pull mode (item embeddings travel to the device) and after the last GRU layer
in push mode (the user embedding travels to the cloud).

Models work on contiguous item indices; :class:`Vocabulary` maps raw ids.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from cooprec.nn import GRU, Dense, Embedding, GraphError, GruCellParams, OptimizerState, Param, adagrad_step, masked_softmax_xent
from cooprec.sparsity import (
    LassoConfig,
    PruningSchedule,
    agp_sparsity_at,
    apply_magnitude_prune,
    gamma_for_sparsity,
    lasso_backward,
    lasso_truncate,
)

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    PULL = "pull"
    PUSH = "push"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 32
    gru_layers: int = 1
    hidden_dim: int = 100
    batch_size: int = 50
    mode: Mode = Mode.PULL
    lasso: LassoConfig = field(default_factory=LassoConfig)
    learning_rate: float = 0.01
    prune_embedding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if isinstance(self.lasso, dict):
            object.__setattr__(self, "lasso", LassoConfig(**self.lasso))
        for name in ("vocab_size", "embedding_dim", "gru_layers", "hidden_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


class Vocabulary:
    """Sorted raw item ids <-> contiguous indices."""

    def __init__(self, item_ids: Iterable[int]):
        self.ids = np.array(sorted(set(int(i) for i in item_ids)), dtype=np.int64)
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._index

    def index(self, item_id: int) -> int:
        try:
            return self._index[int(item_id)]
        except KeyError:
            raise KeyError(f"unknown item id {item_id}") from None

    def encode(self, item_ids: Iterable[int]) -> list[int]:
        return [self.index(i) for i in item_ids]

    def encode_known(self, item_ids: Iterable[int]) -> np.ndarray:
        return np.array([self._index[int(i)] for i in item_ids if int(i) in self._index], dtype=np.int64)


@dataclass
class UserEmbedding:
    user_id: int | None
    vector: np.ndarray
    produced_at: int | None = None


@dataclass
class TrainingReport:
    epochs: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


class RecModel:
    def __init__(self, config: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.config = config
        self.seed = seed
        self.embedding = Embedding(config.vocab_size, config.embedding_dim, rng)
        self.embedding.table.prunable = config.prune_embedding
        dims = [config.embedding_dim] + [config.hidden_dim] * config.gru_layers
        self.grus = [GRU(GruCellParams.init(dims[k], dims[k + 1], rng, f"gru{k}")) for k in range(config.gru_layers)]
        self.output = Dense(config.hidden_dim, config.vocab_size, rng)
        self.gamma = config.lasso.gamma
        self._cache = None
        self._last = None

    # -- structure -------------------------------------------------------

    def params(self) -> list[Param]:
        ps = self.embedding.params()
        for g in self.grus:
            ps += g.params()
        return ps + self.output.params()

    def lower_params(self) -> list[Param]:
        """Parameters below the user embedding (everything but the output head)."""
        head = {id(p) for p in self.output.params()}
        return [p for p in self.params() if id(p) not in head]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def copy(self) -> "RecModel":
        clone = object.__new__(RecModel)
        clone.config = self.config
        clone.seed = self.seed
        clone.gamma = self.gamma
        clone._cache = None
        clone._last = None
        clone.embedding = object.__new__(Embedding)
        clone.embedding.table = self.embedding.table.copy()
        clone.embedding._idx = None
        clone.grus = []
        for g in self.grus:
            c = g.cell
            clone.grus.append(
                GRU(GruCellParams(c.input_dim, c.hidden_dim, c.w_input.copy(), c.w_hidden.copy(), c.bias.copy()))
            )
        clone.output = object.__new__(Dense)
        clone.output.weight = self.output.weight.copy()
        clone.output.bias = self.output.bias.copy()
        clone.output._x = None
        return clone

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.gamma).encode())
        for p in self.params():
            h.update(p.name.encode())
            h.update(p.values.tobytes())
            h.update(p.mask.tobytes())
        return h.hexdigest()

    def weight_sparsity(self) -> float:
        ps = [p for p in self.params() if p.prunable]
        total = sum(p.size for p in ps)
        return sum(p.size - int(np.count_nonzero(p.mask)) for p in ps) / total if total else 0.0

    # -- computation -----------------------------------------------------

    def _check_indices(self, idx: np.ndarray):
        if idx.size and (idx.min() < 0 or idx.max() >= self.config.vocab_size):
            raise KeyError(f"item index outside 0..{self.config.vocab_size - 1}")

    def hidden_states(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Run (batch, time) indices up to the user embedding.

        Returns (raw embeddings, raw top GRU states, user embeddings).
        """
        idx = np.asarray(idx, dtype=np.int64)
        self._check_indices(idx)
        emb = self.embedding.forward(idx)
        x = lasso_truncate(emb, self.gamma)[0] if self.config.mode is Mode.PULL else emb
        for g in self.grus:
            x = g.forward(x)
        user = lasso_truncate(x, self.gamma)[0] if self.config.mode is Mode.PUSH else x
        self._last = (emb, x)
        return emb, x, user

    def loss(self, inputs: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
        """Weighted cross-entropy plus lambda * L1 of the truncated layer; records the graph."""
        emb, top, user = self.hidden_states(inputs)
        logits = self.output.forward(user)
        ce, d_logits = masked_softmax_xent(logits, np.asarray(targets, dtype=np.int64), weights)
        sparse = lasso_truncate(emb, self.gamma)[0] if self.config.mode is Mode.PULL else user
        penalty = float((np.abs(sparse).sum(axis=-1) * weights).sum())
        self._cache = (emb, top, weights, d_logits)
        return ce + self.config.lasso.lambda_lasso * penalty, penalty

    def backward(self):
        if self._cache is None:
            raise GraphError("backward called before loss")
        emb, top, weights, d_logits = self._cache
        lam = self.config.lasso.lambda_lasso * weights[..., None]
        d = self.output.backward(d_logits)
        if self.config.mode is Mode.PUSH:
            d = lasso_backward(d, top, self.gamma, lam)
        for g in reversed(self.grus):
            d = g.backward(d)
        if self.config.mode is Mode.PULL:
            d = lasso_backward(d, emb, self.gamma, lam)
        self.embedding.backward(d)
        self._cache = None

    def truncation_support(self) -> bytes:
        """Support pattern of the last truncated layer, for gradient-check guards."""
        emb, top = self._last
        e = emb if self.config.mode is Mode.PULL else top
        return np.packbits(np.abs(e) > self.gamma).tobytes()

    # -- inference -------------------------------------------------------

    def session_embeddings(self, items: Sequence[int]) -> np.ndarray:
        """User embedding after every prefix of ``items``; shape (len, hidden)."""
        if len(items) == 0:
            raise ValueError("empty prefix")
        return self.hidden_states(np.asarray(items, dtype=np.int64)[None])[2][0]

    def score(self, user_vectors: np.ndarray, candidates: np.ndarray | None = None) -> np.ndarray:
        w, b = self.output.weight.values, self.output.bias.values
        if candidates is None:
            return user_vectors @ w + b
        candidates = np.asarray(candidates, dtype=np.int64)
        self._check_indices(candidates)
        return user_vectors @ w[:, candidates] + b[candidates]


def build_model(config: ModelConfig, seed: int) -> RecModel:
    return RecModel(config, seed)


def forward_scores(model: RecModel, session_prefix: Sequence[int], candidates: Sequence[int] | None = None) -> np.ndarray:
    """Scores of ``candidates`` (or every item) as the next click after ``session_prefix``."""
    user = model.session_embeddings(session_prefix)[-1]
    return model.score(user, None if candidates is None else np.asarray(candidates))


def extract_user_embedding(
    model: RecModel, session_prefix: Sequence[int], user_id: int | None = None, produced_at: int | None = None
) -> UserEmbedding:
    if len(session_prefix) == 0:
        raise ValueError("empty prefix")
    return UserEmbedding(user_id, model.session_embeddings(session_prefix)[-1].copy(), produced_at)


# -- training ----------------------------------------------------------------


def pad_batch(sessions: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forced (inputs, targets, valid) arrays for sessions of length >= 2."""
    T = max(len(s) for s in sessions) - 1
    inputs = np.zeros((len(sessions), T), dtype=np.int64)
    targets = np.zeros((len(sessions), T), dtype=np.int64)
    valid = np.zeros((len(sessions), T))
    for k, s in enumerate(sessions):
        n = len(s) - 1
        inputs[k, :n] = s[:-1]
        targets[k, :n] = s[1:]
        valid[k, :n] = 1.0
    return inputs, targets, valid


def calibrate_gamma(model: RecModel, sessions: Sequence[Sequence[int]], target: float, sample: int = 200) -> float:
    """Set the truncation threshold so about ``target`` of the sparsified entries are zero."""
    if model.config.mode is Mode.PULL:
        values = model.embedding.table.values
    else:
        chosen = [s for s in sessions[:sample] if len(s) >= 2]
        if not chosen:
            return model.gamma
        inputs, _, valid = pad_batch(chosen)
        _, top, _ = model.hidden_states(inputs)
        values = top[valid > 0]
    model.gamma = gamma_for_sparsity(values, target)
    return model.gamma


def embedding_sparsity(model: RecModel, sessions: Sequence[Sequence[int]], sample: int = 200) -> float:
    """Fraction of zeros in the sparsified layer over the given prefixes."""
    chosen = [s for s in sessions[:sample] if len(s) >= 2]
    if not chosen:
        return 0.0
    inputs, _, valid = pad_batch(chosen)
    emb, top, _ = model.hidden_states(inputs)
    layer = emb if model.config.mode is Mode.PULL else top
    picked = layer[valid > 0]
    return float(np.mean(np.abs(picked) <= model.gamma))


def lasso_target_at(target: float, epoch: int, epochs: int) -> float:
    """Embedding sparsity for ``epoch`` (from 1): dense first, cubic ramp, ``target`` at the end."""
    if epochs <= 1:
        return target
    return agp_sparsity_at(PruningSchedule(0.0, target, t0=1, delta_t=1, n=epochs - 1), epoch)


def _step_batch(model: RecModel, batch: Sequence[Sequence[int]], params: list[Param], opt: OptimizerState):
    inputs, targets, valid = pad_batch(batch)
    weights = valid / valid.sum()
    model.zero_grad()
    loss, penalty = model.loss(inputs, targets, weights)
    model.backward()
    adagrad_step(params, opt)
    return loss, penalty, valid.sum()


def train_global(
    model: RecModel,
    sessions: Sequence[Sequence[int]],
    epochs: int,
    optimizer: OptimizerState | None = None,
    schedule: PruningSchedule | None = None,
    seed: int = 0,
) -> TrainingReport:
    """Mini-batch training on whole sessions with optional AGP pruning.

    ``sessions`` are item-index sequences. Pruning to the scheduled sparsity
    happens at the start of each scheduled epoch (epochs count from 1).
    """
    sessions = [list(s) for s in sessions if len(s) >= 2]
    if not sessions:
        raise ValueError("empty training set")
    opt = optimizer or OptimizerState(learning_rate=model.config.learning_rate)
    rng = np.random.default_rng(seed)
    target = model.config.lasso.target_sparsity
    report = TrainingReport()
    params = model.params()
    bs = model.config.batch_size
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        s_t = None
        if schedule is not None and epoch >= schedule.t0 and schedule.is_step(epoch):
            s_t = agp_sparsity_at(schedule, epoch)
            apply_magnitude_prune(params, s_t)
        if target is not None:
            calibrate_gamma(model, sessions, lasso_target_at(target, epoch, epochs))
        order = rng.permutation(len(sessions))
        total, total_pen, steps = 0.0, 0.0, 0.0
        for k in range(0, len(order), bs):
            loss, pen, n = _step_batch(model, [sessions[i] for i in order[k : k + bs]], params, opt)
            total += loss * n
            total_pen += pen * n
            steps += n
        record = {
            "epoch": epoch,
            "loss": total / steps,
            "lasso_penalty": total_pen / steps,
            "s_t": s_t,
            "model_sparsity": model.weight_sparsity(),
            "gamma": model.gamma,
            "wall_time": time.perf_counter() - start,
        }
        report.epochs.append(record)
        log.debug("epoch %d loss %.4f sparsity %.3f", epoch, record["loss"], record["model_sparsity"])
    if target is not None:
        calibrate_gamma(model, sessions, target)
    report.epochs[-1]["embedding_sparsity"] = embedding_sparsity(model, sessions)
    return report


def fine_tune(
    global_model: RecModel,
    sessions: Sequence[Sequence[int]],
    steps: int = 1,
    update_batch_size: int = 50,
    learning_rate: float | None = None,
    flush_partial: bool = True,
    scope: str | None = None,
    initial_accumulator: float = 0.0,
) -> RecModel:
    """Personalize a copy of ``global_model`` on one user's sessions.

    Sessions are replayed in order ``steps`` times. Gradients accumulate
    until at least ``update_batch_size`` next-click predictions are pending,
    then one Adagrad update is applied (checked at session ends). A leftover
    partial batch is applied at the end of a pass when ``flush_partial``.

    ``scope`` picks the trainable tensors: "all", "head" (output layer only)
    or "lower" (everything under the user embedding). In push mode the cloud
    scores with its own output head, so only "lower" is allowed there and it
    is the default; pull mode defaults to "all".
    """
    model = global_model.copy()
    sessions = [list(s) for s in sessions if len(s) >= 2]
    if steps <= 0 or not sessions:
        return model
    push = model.config.mode is Mode.PUSH
    scope = scope or ("lower" if push else "all")
    if push and scope != "lower":
        raise ValueError("push mode can only fine-tune below the user embedding")
    params = {"all": model.params, "head": model.output.params, "lower": model.lower_params}[scope]()
    opt = OptimizerState(
        learning_rate=learning_rate or model.config.learning_rate, initial_accumulator=initial_accumulator
    )

    def apply(batch):
        _step_batch(model, batch, params, opt)

    for _ in range(steps):
        pending, count = [], 0
        for s in sessions:
            pending.append(s)
            count += len(s) - 1
            if count >= update_batch_size:
                apply(pending)
                pending, count = [], 0
        if pending and flush_partial:
            apply(pending)
    return model
