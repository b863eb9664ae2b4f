"""Flat parameter files: JSON header + raw little-endian payloads.

Layout::

    bytes 0..7     magic  b"DCKPT\\x00\\x01\\x00"
    bytes 8..15    header length H, uint64 little-endian
    bytes 16..16+H UTF-8 JSON header
    remainder      concatenated array payloads

The header lists every array as ``{"name", "shape", "dtype", "offset",
"nbytes"}`` (offset relative to the payload start), the SHA-256 of the
payload block, and a free-form ``meta`` object.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DCKPT\x00\x01\x00"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


class CheckpointError(ValueError):
    """Raised for malformed, truncated or corrupt parameter files."""


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {key} for {name!r}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes(order="C")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": key, "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = {
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": dict(meta or {}),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a parameter file")
        (hlen,) = struct.unpack("<Q", head[8:])
        hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a file written by :func:`save_arrays`; verifies the checksum."""
    header = read_header(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    payload = raw[16 + hlen:]
    expected = sum(e["nbytes"] for e in header["arrays"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        a = np.frombuffer(payload, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(e["dtype"])
    return arrays, header.get("meta", {})
