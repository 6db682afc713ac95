"""Small dense numpy kernel for the recommendation network.

Layers cache what their backward pass needs during ``forward`` and write
gradients into :attr:`Param.grad` during ``backward``. Everything trains in
float64; the wire format narrows to float32 separately.

Masked weights (mask == 0) hold the value 0, receive gradient 0 and are never
touched by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Raised when backward is requested without a recorded forward pass."""


class Param:
    def __init__(self, name: str, values: np.ndarray, prunable: bool = True):
        self.name = name
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.mask = np.ones(self.values.shape, dtype=bool)
        self.prunable = prunable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def apply_mask(self):
        self.values[~self.mask] = 0.0
        self.grad[~self.mask] = 0.0

    def sparsity(self) -> float:
        return float(np.count_nonzero(~self.mask)) / self.size if self.size else 0.0

    def copy(self) -> "Param":
        p = Param(self.name, self.values.copy(), self.prunable)
        p.mask = self.mask.copy()
        return p

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, sparsity={self.sparsity():.3f})"


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- stateless forward ops ---------------------------------------------------


def dense_forward(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``W @ x + b`` for a weight matrix shaped (out, in)."""
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or np.shape(bias) != (weights.shape[0],):
        raise ValueError(f"shape mismatch: W{weights.shape}, x{x.shape}, b{np.shape(bias)}")
    if mask is not None:
        weights = np.where(mask, weights, 0.0)
    return x @ weights.T + bias


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_cross_entropy(scores: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= target < scores.shape[-1]:
        raise IndexError(f"target {target} outside 0..{scores.shape[-1] - 1}")
    shifted = scores - np.max(scores)
    log_z = np.log(np.sum(np.exp(shifted)))
    return float(log_z - shifted[target]), np.exp(shifted - log_z)


# -- layers ------------------------------------------------------------------


class Embedding:
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, name: str = "embedding"):
        self.table = Param(name, glorot_uniform(rng, (vocab_size, dim), vocab_size, dim))
        self._idx = None

    def params(self) -> list[Param]:
        return [self.table]

    def forward(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.table.shape[0]):
            raise IndexError("item index outside the vocabulary")
        self._idx = idx
        return self.table.values[idx]

    def backward(self, d_out: np.ndarray):
        if self._idx is None:
            raise GraphError("Embedding.backward called before forward")
        np.add.at(self.table.grad, self._idx.reshape(-1), d_out.reshape(-1, d_out.shape[-1]))
        self.table.grad *= self.table.mask


@dataclass
class GruCellParams:
    input_dim: int
    hidden_dim: int
    w_input: Param  # (input_dim, 3H), gate order: update, reset, candidate
    w_hidden: Param  # (H, 3H)
    bias: Param  # (3H,)

    def __post_init__(self):
        h3 = 3 * self.hidden_dim
        if (
            self.w_input.shape != (self.input_dim, h3)
            or self.w_hidden.shape != (self.hidden_dim, h3)
            or self.bias.shape != (h3,)
        ):
            raise ValueError("GRU tensor shapes disagree with (input_dim, hidden_dim)")

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, prefix: str = "gru") -> "GruCellParams":
        h3 = 3 * hidden_dim
        return cls(
            input_dim,
            hidden_dim,
            Param(f"{prefix}.w_input", glorot_uniform(rng, (input_dim, h3), input_dim, hidden_dim)),
            Param(f"{prefix}.w_hidden", glorot_uniform(rng, (hidden_dim, h3), hidden_dim, hidden_dim)),
            Param(f"{prefix}.bias", np.zeros(h3), prunable=False),
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruCellParams":
        h3 = 3 * hidden_dim
        return cls(
            input_dim,
            hidden_dim,
            Param("w_input", np.zeros((input_dim, h3))),
            Param("w_hidden", np.zeros((hidden_dim, h3))),
            Param("bias", np.zeros(h3), prunable=False),
        )

    def params(self) -> list[Param]:
        return [self.w_input, self.w_hidden, self.bias]


class GRU:
    """GRU layer over padded batches shaped (batch, time, features).

    Recurrence, with the reset gate applied to the previous state before the
    candidate projection::

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        n = tanh(x Wn + (r * h) Un + bn)
        h' = (1 - z) * h + z * n
    """

    def __init__(self, cell: GruCellParams):
        self.cell = cell
        self._cache = None

    def params(self) -> list[Param]:
        return self.cell.params()

    def forward(self, x: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
        c = self.cell
        H = c.hidden_dim
        if x.ndim != 3 or x.shape[2] != c.input_dim:
            raise ValueError(f"expected (batch, time, {c.input_dim}) input, got {x.shape}")
        B, T, _ = x.shape
        h = np.zeros((B, H)) if h0 is None else np.broadcast_to(np.asarray(h0, dtype=np.float64), (B, H)).copy()
        if h.shape != (B, H):
            raise ValueError(f"h0 must have {H} entries")
        Wx, Wh, b = c.w_input.values, c.w_hidden.values, c.bias.values
        xw = x @ Wx + b  # (B, T, 3H)
        hs = np.empty((B, T, H))
        h_prev = np.empty((B, T, H))
        zs = np.empty((B, T, H))
        rs = np.empty((B, T, H))
        ns = np.empty((B, T, H))
        for t in range(T):
            h_prev[:, t] = h
            zr = sigmoid(xw[:, t, : 2 * H] + h @ Wh[:, : 2 * H])
            z, r = zr[:, :H], zr[:, H:]
            n = np.tanh(xw[:, t, 2 * H :] + (r * h) @ Wh[:, 2 * H :])
            h = (1.0 - z) * h + z * n
            zs[:, t], rs[:, t], ns[:, t], hs[:, t] = z, r, n, h
        self._cache = (x, h_prev, zs, rs, ns)
        return hs

    def backward(self, d_hs: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise GraphError("GRU.backward called before forward")
        x, h_prev, zs, rs, ns = self._cache
        c = self.cell
        H = c.hidden_dim
        Wx, Wh = c.w_input.values, c.w_hidden.values
        Wh_zr, Wh_n = Wh[:, : 2 * H], Wh[:, 2 * H :]
        B, T, _ = d_hs.shape
        da = np.empty((B, T, 3 * H))
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            z, r, n, hp = zs[:, t], rs[:, t], ns[:, t], h_prev[:, t]
            dh = dh + d_hs[:, t]
            da_n = dh * z * (1.0 - n * n)
            d_rh = da_n @ Wh_n.T
            da_z = dh * (n - hp) * z * (1.0 - z)
            da_r = d_rh * hp * r * (1.0 - r)
            da[:, t, :H], da[:, t, H : 2 * H], da[:, t, 2 * H :] = da_z, da_r, da_n
            dh = dh * (1.0 - z) + d_rh * r + da[:, t, : 2 * H] @ Wh_zr.T
        flat_da = da.reshape(-1, 3 * H)
        c.w_input.grad += x.reshape(-1, x.shape[2]).T @ flat_da
        c.w_hidden.grad[:, : 2 * H] += h_prev.reshape(-1, H).T @ flat_da[:, : 2 * H]
        c.w_hidden.grad[:, 2 * H :] += (rs * h_prev).reshape(-1, H).T @ flat_da[:, 2 * H :]
        c.bias.grad += flat_da.sum(axis=0)
        for p in self.params():
            p.grad *= p.mask
        return da @ Wx.T


def gru_forward(cell: GruCellParams, inputs: Sequence[np.ndarray], h0: np.ndarray) -> list[np.ndarray]:
    """Run one unbatched sequence through a GRU cell."""
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape != (cell.hidden_dim,):
        raise ValueError(f"h0 must have {cell.hidden_dim} entries, got {h0.shape}")
    if len(inputs) == 0:
        return []
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cell.input_dim:
        raise ValueError(f"inputs must have {cell.input_dim} entries each")
    return list(GRU(cell).forward(x[None], h0[None])[0])


class Dense:
    """Affine output head stored as (in, out) so batched rows multiply directly."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "output"):
        self.weight = Param(f"{name}.weight", glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim))
        self.bias = Param(f"{name}.bias", np.zeros(out_dim), prunable=False)
        self._x = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.values + self.bias.values

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise GraphError("Dense.backward called before forward")
        x = self._x.reshape(-1, self._x.shape[-1])
        d = d_out.reshape(-1, d_out.shape[-1])
        self.weight.grad += x.T @ d
        self.weight.grad *= self.weight.mask
        self.bias.grad += d.sum(axis=0)
        return d_out @ self.weight.values.T


def masked_softmax_xent(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy over rows; returns (loss, d loss / d logits)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - log_z
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * weights).sum())
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    return loss, d * weights[..., None]


# -- optimisation ------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    initial_accumulator: float = 0.0

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.learning_rate,
            self.epsilon,
            {k: v.copy() for k, v in self.accumulators.items()},
            self.initial_accumulator,
        )


def adagrad_step(params: Iterable[Param], state: OptimizerState) -> OptimizerState:
    for p in params:
        acc = state.accumulators.get(p.name)
        if acc is None:
            acc = state.accumulators[p.name] = np.full_like(p.values, state.initial_accumulator)
        g = np.where(p.mask, p.grad, 0.0)
        acc += g * g
        p.values -= state.learning_rate * g / (np.sqrt(acc) + state.epsilon)
        p.values[~p.mask] = 0.0
    return state


# -- gradient oracle ---------------------------------------------------------


def finite_diff_check(
    fn: Callable[[], float],
    params: Sequence[Param],
    eps: float = 1e-5,
    skip: Callable[[Param, tuple], bool] | None = None,
    guard: Callable[[], object] | None = None,
) -> float:
    """Compare ``p.grad`` against central differences of ``fn``.

    ``fn`` re-evaluates the loss from the current parameter values. Gradients
    must already sit in ``p.grad``. Masked coordinates are skipped, as are
    those rejected by ``skip``. When ``guard`` is given, a coordinate is also
    skipped if the guard's value (e.g. a truncation support pattern) differs
    at either perturbed point, which keeps kinks out of the comparison.

    Returns the max over coordinates of ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    worst = 0.0
    base_guard = guard() if guard is not None else None
    for p in params:
        for idx in np.ndindex(p.shape):
            if not p.mask[idx] or (skip is not None and skip(p, idx)):
                continue
            orig = p.values[idx]
            p.values[idx] = orig + eps
            f_plus = fn()
            moved = guard is not None and guard() != base_guard
            p.values[idx] = orig - eps
            f_minus = fn()
            moved = moved or (guard is not None and guard() != base_guard)
            p.values[idx] = orig
            if moved:
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = p.grad[idx]
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, err)
    return worst
