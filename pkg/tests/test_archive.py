import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpmkit.archive import decode_archive, encode_archive, payload_digest, read_archive, write_archive
from dpmkit.errors import ValidationError


def test_roundtrip_2x3(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    entries, meta = read_archive(write_archive({"w": a}, tmp_path / "a.bin", {"k": 1}))
    assert entries["w"].dtype == np.float32 and entries["w"].shape == (2, 3)
    assert np.array_equal(entries["w"], a) and meta == {"k": 1}


def test_fifty_entries_hash_equal(tmp_path):
    rng = np.random.default_rng(0)
    entries = {}
    for i in range(50):
        shape = tuple(rng.integers(0, 5, size=rng.integers(0, 4)))
        dt = np.float32 if i % 2 else np.float64
        entries[f"e{i}"] = rng.standard_normal(shape).astype(dt)
    path = write_archive(entries, tmp_path / "x.bin")
    back, _ = read_archive(path)
    expected = hashlib.sha256(b"".join(np.ascontiguousarray(v).astype(v.dtype.newbyteorder("<")).tobytes()
                                       for v in entries.values())).hexdigest()
    assert payload_digest(path) == expected
    assert payload_digest(write_archive(back, tmp_path / "y.bin")) == expected
    for k, v in entries.items():
        assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()


@given(st.lists(st.floats(allow_nan=False, width=64), min_size=0, max_size=20))
def test_bit_exact(values):
    a = np.array(values, dtype=np.float64)
    back, _ = decode_archive(encode_archive({"a": a}))
    assert back["a"].tobytes() == a.tobytes()


def test_little_endian_layout():
    data = encode_archive({"x": np.array([1.0], dtype=np.float32)})
    (hlen,) = struct.unpack_from("<Q", data, 0)
    assert data[8 + hlen:] == struct.pack("<f", 1.0)
    big = np.array([1.0, 2.0], dtype=">f8")
    back, _ = decode_archive(encode_archive({"b": big}))
    assert back["b"].dtype == np.dtype("<f8") and back["b"].tolist() == [1.0, 2.0]


def test_payload_length_mismatch_reports_position():
    data = encode_archive({"x": np.zeros(3, np.float32)})
    with pytest.raises(ValidationError, match=str(len(data) - 4)):
        decode_archive(data[:-4])
    with pytest.raises(ValidationError, match="byte"):
        decode_archive(data + b"\0")


def test_header_length_past_end():
    data = struct.pack("<Q", 1000) + b"{}"
    with pytest.raises(ValidationError, match="1000"):
        decode_archive(data)


def test_malformed_and_duplicates():
    with pytest.raises(ValidationError):
        decode_archive(b"\x01")
    hdr = b'{"format_version": 1, "entries": [{"name": "a", "dtype": "f32", "shape": []},' \
          b' {"name": "a", "dtype": "f32", "shape": []}]}'
    with pytest.raises(ValidationError, match="duplicate"):
        decode_archive(struct.pack("<Q", len(hdr)) + hdr + b"\0" * 8)
    bad = b"not json"
    with pytest.raises(ValidationError, match="byte 8"):
        decode_archive(struct.pack("<Q", len(bad)) + bad)


def test_unsupported_dtype():
    with pytest.raises(ValidationError):
        encode_archive({"i": np.zeros(2, np.int32)})
