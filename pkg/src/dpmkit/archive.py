"""NamedArrayArchive: a length-prefixed JSON header followed by raw little-endian arrays.

Layout::

    u64 little-endian  header length N
    N bytes            UTF-8 JSON {"format_version", "entries": [{name, dtype, shape}], "metadata"}
    payload            arrays in header order, row-major, little-endian
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def encode_archive(entries: dict, metadata: dict | None = None) -> bytes:
    manifest, chunks = [], []
    for name, array in entries.items():
        array = np.asarray(array)
        code = _CODES.get(array.dtype.newbyteorder("=")) if array.dtype.kind == "f" else None
        if code is None:
            raise ValidationError(f"entry {name!r}: unsupported dtype {array.dtype}")
        manifest.append({"name": name, "dtype": code, "shape": list(array.shape)})
        chunks.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "entries": manifest, "metadata": metadata or {}},
        sort_keys=True,
    ).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_archive(data: bytes) -> tuple[dict, dict]:
    if len(data) < 8:
        raise ValidationError("archive truncated before header length (byte 0)")
    (hlen,) = struct.unpack_from("<Q", data, 0)
    if 8 + hlen > len(data):
        raise ValidationError(f"header length {hlen} runs past end of file at byte {len(data)}")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed header at byte 8: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {header.get('format_version')!r}")
    entries, seen = {}, set()
    offset = 8 + hlen
    for i, entry in enumerate(header.get("entries", [])):
        name = entry.get("name")
        if name in seen:
            raise ValidationError(f"duplicate entry name {name!r} (entry {i})")
        seen.add(name)
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise ValidationError(f"entry {name!r}: unknown dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise ValidationError(
                f"entry {name!r} needs bytes {offset}..{offset + nbytes} but payload ends at byte {len(data)}"
            )
        entries[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ValidationError(f"payload length mismatch: entries end at byte {offset}, file has {len(data)} bytes")
    return entries, header.get("metadata", {})


def write_archive(entries: dict, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_archive(entries, metadata))
    return path


def read_archive(path) -> tuple[dict, dict]:
    return decode_archive(Path(path).read_bytes())


def payload_digest(path) -> str:
    data = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", data, 0)
    return hashlib.sha256(data[8 + hlen:]).hexdigest()
