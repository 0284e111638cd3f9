"""Binary container: JSON header followed by little-endian float64 arrays.

Layout::

    b"DALNCKPT"                      8-byte magic
    uint64 LE                        header length in bytes
    header                           UTF-8 JSON, sorted keys
    uint32 LE                        CRC-32 of the header bytes
    payload                          concatenated '<f8' arrays

The header lists every array (name, shape, original kind) and carries the
SHA-256 of the payload, the format version and free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatVersionError, IntegrityError

MAGIC = b"DALNCKPT"
FORMAT_VERSION = 1


def encode(meta: dict, arrays: dict, version: int = FORMAT_VERSION) -> bytes:
    specs, chunks = [], []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        kind = "int" if arr.dtype.kind in "iub" else "float"
        data = np.ascontiguousarray(arr, dtype="<f8")
        if kind == "int" and np.any(data.astype(arr.dtype) != arr):
            raise ValueError(f"integer array {name!r} is not exactly representable")
        specs.append({"name": name, "shape": list(arr.shape), "kind": kind})
        chunks.append(data.tobytes())
    payload = b"".join(chunks)
    header = {
        "format_version": version,
        "arrays": specs,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + struct.pack("<I", zlib.crc32(hbytes)) + payload


def decode(blob: bytes, version: int = FORMAT_VERSION):
    """Inverse of :func:`encode`; returns ``(meta, arrays)``."""
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise IntegrityError("not a checkpoint container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    end = 16 + hlen
    if len(blob) < end + 4:
        raise IntegrityError("truncated header")
    hbytes = blob[16:end]
    (crc,) = struct.unpack("<I", blob[end:end + 4])
    if zlib.crc32(hbytes) != crc:
        raise IntegrityError("header checksum mismatch")
    header = json.loads(hbytes)
    if header.get("format_version") != version:
        raise FormatVersionError(
            f"container format version {header.get('format_version')} is not supported (expected {version})"
        )
    payload = blob[end + 4:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError("payload checksum mismatch")
    arrays, k = {}, 0
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        data = np.frombuffer(payload, dtype="<f8", count=count, offset=k).reshape(spec["shape"])
        k += 8 * count
        arrays[spec["name"]] = data.astype(np.int64) if spec["kind"] == "int" else data.astype(np.float64)
    if k != len(payload):
        raise IntegrityError("payload size does not match the header")
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, arrays))
    tmp.replace(path)


def load(path):
    return decode(Path(path).read_bytes())
