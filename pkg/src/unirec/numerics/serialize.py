"""Self-describing binary container for named float64 tensors.

Layout::

    magic (8 bytes) | format version (u32 LE) | header length (u64 LE)
    | header (UTF-8 JSON, sorted keys) | payload (little-endian f8)
    | SHA-256 of everything before it (32 bytes)

The header carries caller metadata plus a ``tensors`` table of
``{name, shape, offset}`` entries pointing into the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import CompatibilityError

MAGIC = b"UNIRECK\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_LEN = 32


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_container(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], header: Mapping[str, Any]) -> None:
    table = []
    chunks = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    meta = dict(header)
    meta["tensors"] = table
    head = canonical_json(meta).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    blob = body + hashlib.sha256(body).digest()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + _DIGEST_LEN:
        raise CompatibilityError(f"{path}: file too short to be a checkpoint")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    magic, version, head_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CompatibilityError(f"{path}: not a unirec checkpoint")
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CompatibilityError(f"{path}: checksum mismatch (truncated or corrupt)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CompatibilityError(f"{path}: unreadable header") from exc

    payload = memoryview(body)[start + head_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header.pop("tensors"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + 8 * count
        if hi > len(payload):
            raise CompatibilityError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[lo:hi], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(shape)
    return header, tensors
