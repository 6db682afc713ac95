"""Bit-exact payload encodings.

Sparse vector layout, all little-endian::

    u32 dimension | u32 value count | bitmap, ceil(d / 8) bytes | f32 values

Bit ``i`` of the bitmap is bit ``i % 8`` (LSB first) of byte ``i // 8``.
Values follow in ascending index order. A zero vector still carries its
header and bitmap.

A model is a header (magic, JSON config) followed by named tensors, each
encoded as a sparse vector over its flattened masked values.
"""

from __future__ import annotations

import json
import struct

import numpy as np

HEADER = struct.Struct("<II")
MODEL_MAGIC = b"CRM1"
DENSE_MAGIC = b"CRD1"


class WireError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class Truncated(WireError):
    pass


def sparse_size(dimension: int, nnz: int) -> int:
    return HEADER.size + (dimension + 7) // 8 + 4 * nnz


def dense_size(dimension: int) -> int:
    return HEADER.size + 4 * dimension


def encode_sparse(vector) -> bytes:
    v = np.asarray(vector, dtype=np.float32).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    support = v != 0
    values = v[support].astype("<f4")
    bitmap = np.packbits(support, bitorder="little")
    return HEADER.pack(v.size, values.size) + bitmap.tobytes() + values.tobytes()


def decode_sparse_at(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one sparse vector starting at ``offset``; returns (vector, end offset)."""
    if len(buf) - offset < HEADER.size:
        raise Truncated("missing sparse header", offset)
    dim, count = HEADER.unpack_from(buf, offset)
    pos = offset + HEADER.size
    nbytes = (dim + 7) // 8
    if len(buf) - pos < nbytes:
        raise Truncated("bitmap cut short", pos)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos), bitorder="little")
    if dim % 8 and bits[dim:].any():
        raise WireError("padding bits set in bitmap", pos + nbytes - 1)
    support = bits[:dim].astype(bool)
    if int(support.sum()) != count:
        raise WireError(f"bitmap has {int(support.sum())} set bits but header declares {count}", offset + 4)
    pos += nbytes
    if len(buf) - pos < 4 * count:
        raise Truncated("values cut short", pos)
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    out = np.zeros(dim, dtype=np.float32)
    out[support] = values
    return out, pos + 4 * count


def decode_sparse(buf: bytes) -> np.ndarray:
    vec, end = decode_sparse_at(buf, 0)
    if end != len(buf):
        raise WireError(f"{len(buf) - end} trailing bytes", end)
    return vec


def encode_dense(vector) -> bytes:
    v = np.asarray(vector, dtype="<f4").ravel()
    return HEADER.pack(v.size, v.size) + v.tobytes()


def decode_dense_at(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if len(buf) - offset < HEADER.size:
        raise Truncated("missing dense header", offset)
    dim, count = HEADER.unpack_from(buf, offset)
    if dim != count:
        raise WireError("dense vector with count != dimension", offset + 4)
    pos = offset + HEADER.size
    if len(buf) - pos < 4 * dim:
        raise Truncated("values cut short", pos)
    return np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).copy(), pos + 4 * dim


# -- item id lists -----------------------------------------------------------


def encode_ids(ids) -> bytes:
    a = np.asarray(ids, dtype="<u4")
    return struct.pack("<I", a.size) + a.tobytes()


def decode_ids_at(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if len(buf) - offset < 4:
        raise Truncated("missing id count", offset)
    (n,) = struct.unpack_from("<I", buf, offset)
    pos = offset + 4
    if len(buf) - pos < 4 * n:
        raise Truncated("ids cut short", pos)
    return np.frombuffer(buf, dtype="<u4", count=n, offset=pos).astype(np.int64), pos + 4 * n


# -- models ------------------------------------------------------------------


def _model_tensors(model) -> list[tuple[str, np.ndarray]]:
    return [(p.name, np.where(p.mask, p.values, 0.0)) for p in model.params()]


def encode_model(model, dense: bool = False) -> bytes:
    """Serialize config, truncation threshold and every tensor.

    ``dense=True`` writes the plain float32 layout used as the size baseline.
    Identical models always give identical bytes.
    """
    meta = {"config": model.config.to_dict(), "gamma": model.gamma, "seed": model.seed}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    tensors = _model_tensors(model)
    parts = [DENSE_MAGIC if dense else MODEL_MAGIC, struct.pack("<II", len(meta_bytes), len(tensors)), meta_bytes]
    for name, values in tensors:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", values.ndim) + struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(encode_dense(values) if dense else encode_sparse(values))
    return b"".join(parts)


def decode_model(buf: bytes):
    """Rebuild a model from :func:`encode_model` bytes (values in float32 precision)."""
    from cooprec.model import ModelConfig, RecModel

    if len(buf) < 12:
        raise Truncated("missing model header", 0)
    magic = buf[:4]
    if magic not in (MODEL_MAGIC, DENSE_MAGIC):
        raise WireError(f"bad magic {magic!r}", 0)
    meta_len, n_tensors = struct.unpack_from("<II", buf, 4)
    pos = 12
    if len(buf) - pos < meta_len:
        raise Truncated("config cut short", pos)
    meta = json.loads(buf[pos : pos + meta_len])
    pos += meta_len
    model = RecModel(ModelConfig(**meta["config"]), meta["seed"])
    model.gamma = meta["gamma"]
    by_name = {p.name: p for p in model.params()}
    for _ in range(n_tensors):
        if len(buf) - pos < 3:
            raise Truncated("tensor header cut short", pos)
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        if magic == MODEL_MAGIC:
            flat, pos = decode_sparse_at(buf, pos)
        else:
            flat, pos = decode_dense_at(buf, pos)
        p = by_name.get(name)
        if p is None or p.shape != tuple(shape):
            raise WireError(f"unexpected tensor {name} {shape}", pos)
        p.values = flat.astype(np.float64).reshape(shape)
        p.grad = np.zeros_like(p.values)
        if p.prunable:
            p.mask = p.values != 0
    if pos != len(buf):
        raise WireError(f"{len(buf) - pos} trailing bytes", pos)
    return model
