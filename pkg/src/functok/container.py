"""Little-endian tensor container with a JSON header and CRC32 trailer.

Layout::

    magic (8 bytes) | version u32 | header_len u64 | header JSON (utf-8)
    | tensor payloads, in manifest order | crc32 u32 over everything before

LM checkpoints, SAE checkpoints and graph files all use this format; they
differ only in magic bytes and header contents.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ChecksumError, DomainError

FORMAT_VERSION = 1

_PREFIX = struct.Struct("<8sIQ")


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    manifest = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        raw = arr.astype(le, copy=False).tobytes(order="C")
        manifest.append(
            {"name": name, "dtype": le.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    head = _canonical_json({"meta": header, "tensors": manifest})
    body = _PREFIX.pack(magic, FORMAT_VERSION, len(head)) + head + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + 4:
        raise ChecksumError("file too short: truncated or not a container")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise ChecksumError("CRC32 checksum mismatch: file is truncated or corrupt")
    got_magic, version, head_len = _PREFIX.unpack_from(body, 0)
    if got_magic != magic:
        raise DomainError(f"bad magic bytes {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise DomainError(f"unsupported container version {version} (reader supports {FORMAT_VERSION})")
    start = _PREFIX.size
    head = json.loads(body[start : start + head_len].decode("utf-8"))
    data_start = start + head_len
    tensors = {}
    for entry in head["tensors"]:
        lo = data_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(body):
            raise ChecksumError(f"tensor {entry['name']!r} extends past end of file")
        arr = np.frombuffer(body[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return head["meta"], tensors


def write(path: str | os.PathLike, magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Write atomically: readers never observe a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(magic, header, tensors))
    os.replace(tmp, path)
    return path


def read(path: str | os.PathLike, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DomainError(f"no such file: {path}")
    return decode(path.read_bytes(), magic)
