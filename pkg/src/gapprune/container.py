"""Binary container shared by checkpoints, mask files, quantized models and attack batches.

Layout (all integers little-endian)::

    b"GAPW" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
    | section payloads, concatenated in metadata order | SHA-256 of all preceding bytes

The metadata document always carries ``kind`` and ``sections``; each section
entry gives ``name``, ``encoding`` and ``shape``. Encodings:

* ``f4`` / ``f8``: little-endian IEEE floats
* ``u1``: raw bytes
* ``i8``: little-endian 64-bit signed ints
* ``bits``: booleans packed 8 per byte, most significant bit first
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"GAPW"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_DIGEST_SIZE = 32

_DTYPES = {"f4": "<f4", "f8": "<f8", "u1": "u1", "i8": "<i8"}


def _encode(array: np.ndarray, encoding: str) -> bytes:
    if encoding == "bits":
        return np.packbits(np.asarray(array, dtype=bool).ravel()).tobytes()
    return np.ascontiguousarray(array, dtype=_DTYPES[encoding]).tobytes()


def _nbytes(shape, encoding: str) -> int:
    count = math.prod(shape)
    if encoding == "bits":
        return (count + 7) // 8
    return count * np.dtype(_DTYPES[encoding]).itemsize


def _decode(buf: bytes, shape, encoding: str) -> np.ndarray:
    count = math.prod(shape)
    if encoding == "bits":
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=count)
        return bits.astype(bool).reshape(shape)
    arr = np.frombuffer(buf, dtype=_DTYPES[encoding]).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="))


def dumps(kind: str, meta: dict, sections: List[Tuple[str, np.ndarray, str]]) -> bytes:
    table = []
    payload = []
    for name, array, encoding in sections:
        if encoding not in _DTYPES and encoding != "bits":
            raise ValueError(f"unknown encoding {encoding!r}")
        table.append({"name": name, "encoding": encoding, "shape": list(np.shape(array))})
        payload.append(_encode(array, encoding))
    doc = dict(meta, kind=kind, sections=table)
    meta_bytes = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def loads(raw: bytes, source: str = "<bytes>") -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse container bytes into ``(metadata, {section name: array})``.

    Raises:
        FormatError: wrong magic number or unsupported version.
        IntegrityError: truncated payload or checksum mismatch.
    """
    if len(raw) < _HEADER.size:
        raise IntegrityError(f"{source}: truncated header")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    meta_end = _HEADER.size + meta_len
    if len(raw) < meta_end + _DIGEST_SIZE:
        raise IntegrityError(f"{source}: truncated metadata")
    try:
        meta = json.loads(raw[_HEADER.size : meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source}: unreadable metadata") from exc

    expected = meta_end + sum(_nbytes(s["shape"], s["encoding"]) for s in meta["sections"])
    if len(raw) != expected + _DIGEST_SIZE:
        raise IntegrityError(
            f"{source}: payload is {len(raw) - _DIGEST_SIZE - meta_end} bytes, "
            f"expected {expected - meta_end}"
        )
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{source}: checksum mismatch")

    arrays = {}
    offset = meta_end
    for sec in meta["sections"]:
        size = _nbytes(sec["shape"], sec["encoding"])
        arrays[sec["name"]] = _decode(raw[offset : offset + size], tuple(sec["shape"]), sec["encoding"])
        offset += size
    return meta, arrays


def write(path, kind: str, meta: dict, sections: List[Tuple[str, np.ndarray, str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(kind, meta, sections))
    return path


def read(path, kind: str = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    meta, arrays = loads(path.read_bytes(), str(path))
    if kind is not None and meta.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} container, found {meta.get('kind')!r}")
    return meta, arrays
