import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cooprec.model import ModelConfig, RecModel
from cooprec.sparsity import apply_magnitude_prune
from cooprec.wire import (
    Truncated,
    WireError,
    decode_ids_at,
    decode_model,
    decode_sparse,
    dense_size,
    encode_ids,
    encode_model,
    encode_sparse,
    sparse_size,
)


def test_eight_dim_example_bytes():
    v = np.zeros(8, dtype=np.float32)
    v[1], v[5] = 1.5, -2.0
    buf = encode_sparse(v)
    assert len(buf) == 17
    assert buf[:8] == struct.pack("<II", 8, 2)
    assert buf[8] == 0b00100010
    assert struct.unpack("<2f", buf[9:]) == (1.5, -2.0)


def test_zero_vector_is_header_and_bitmap():
    buf = encode_sparse(np.zeros(8))
    assert len(buf) == 9 and buf[8] == 0
    assert not decode_sparse(buf).any()


def test_ten_thousand_at_ten_percent():
    v = np.zeros(10_000, dtype=np.float32)
    v[::10] = 1.0
    assert len(encode_sparse(v)) == 5258 == sparse_size(10_000, 1000)
    assert dense_size(10_000) == 40_008


def test_empty_payload_is_truncated():
    with pytest.raises(Truncated) as err:
        decode_sparse(b"")
    assert err.value.offset == 0


def test_popcount_mismatch():
    buf = bytearray(encode_sparse(np.array([0, 1, 0, 2], dtype=np.float32)))
    buf[4] = 3
    with pytest.raises(WireError) as err:
        decode_sparse(bytes(buf))
    assert err.value.offset == 4


def test_cut_values_report_offset():
    buf = encode_sparse(np.array([1.0, 2.0, 3.0]))
    with pytest.raises(Truncated) as err:
        decode_sparse(buf[:-2])
    assert err.value.offset == 9


def test_padding_bits_rejected():
    buf = bytearray(encode_sparse(np.zeros(3)))
    buf[8] = 0b10000000
    with pytest.raises(WireError):
        decode_sparse(bytes(buf))


def test_trailing_bytes_rejected():
    with pytest.raises(WireError):
        decode_sparse(encode_sparse(np.ones(2)) + b"\0")


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        encode_sparse(np.array([np.inf]))


def test_ids_round_trip():
    buf = encode_ids([5, 0, 70000])
    ids, end = decode_ids_at(buf)
    assert ids.tolist() == [5, 0, 70000] and end == len(buf) == 16


sparse_vectors = st.integers(0, 300).flatmap(
    lambda d: arrays(
        np.float32,
        d,
        elements=st.one_of(st.just(0.0), st.floats(allow_nan=False, allow_infinity=False, width=32)),
    )
)


@settings(max_examples=200)
@given(sparse_vectors)
def test_round_trip_and_size(v):
    buf = encode_sparse(v)
    assert len(buf) == sparse_size(v.size, int(np.count_nonzero(v)))
    out = decode_sparse(buf)
    assert out.tobytes() == np.where(v == 0, np.float32(0), v).tobytes()


def small_model(seed=0):
    return RecModel(ModelConfig(vocab_size=60, embedding_dim=8, hidden_dim=12), seed)


def test_model_round_trip_is_byte_stable():
    model = small_model()
    apply_magnitude_prune(model.params(), 0.5)
    first = encode_model(model)
    assert encode_model(decode_model(first)) == first
    assert encode_model(small_model()) == encode_model(small_model())


def test_dense_model_round_trip():
    model = small_model(3)
    buf = encode_model(model, dense=True)
    again = decode_model(buf)
    for a, b in zip(model.params(), again.params()):
        assert np.array_equal(a.values.astype(np.float32), b.values.astype(np.float32))


def test_unpruned_model_overhead_is_small():
    model = small_model()
    assert len(encode_model(model)) <= 1.04 * len(encode_model(model, dense=True))


def test_pruned_model_is_seven_times_smaller():
    model = RecModel(ModelConfig(vocab_size=500, embedding_dim=32, hidden_dim=100), 0)
    apply_magnitude_prune(model.params(), 0.9)
    assert len(encode_model(model)) * 7 <= len(encode_model(model, dense=True))


def test_bad_magic():
    buf = encode_model(small_model())
    with pytest.raises(WireError) as err:
        decode_model(b"XXXX" + buf[4:])
    assert err.value.offset == 0
    with pytest.raises(Truncated):
        decode_model(buf[:-3])
