"""Versioned binary container for named arrays.

Layout (all little-endian)::

    magic   8 bytes  b"SPHSEG\\x00\\x01"
    version uint32
    kind    uint32   length of the kind string, then the utf-8 kind string
    header  uint32   length of the JSON header, then the header itself
    payload          arrays back to back, in header order

The JSON header lists ``{"name", "dtype", "shape", "offset", "nbytes"}`` per
array plus a free-form ``meta`` dict. A JSON sidecar (``<file>.json``) repeats
the header with per-array sha256 checksums.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DataError

MAGIC = b"SPHSEG\x00\x01"
VERSION = 1

_ALLOWED = {"<f8", "<f4", "<i4", "<i8", "<u1", "|u1", "|b1", "<u4"}


def _normalize(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.bool_:
        return arr
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def write_container(
    path: str | Path,
    kind: str,
    arrays: Mapping[str, np.ndarray],
    meta: Mapping[str, Any] | None = None,
    sidecar: bool = True,
) -> None:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = _normalize(np.asarray(arr))
        if arr.dtype.str not in _ALLOWED:
            raise DataError(f"array {name!r}: unsupported dtype {arr.dtype}")
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    kind_b = kind.encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(kind_b)))
        fh.write(kind_b)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    if sidecar:
        side = {
            "kind": kind,
            "version": VERSION,
            "meta": dict(meta or {}),
            "arrays": [
                {**e, "sha256": hashlib.sha256(b).hexdigest()} for e, b in zip(entries, blobs)
            ],
        }
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``. Raises DataError on a malformed file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: bad magic bytes")
    pos = 8
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    (klen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    got_kind = raw[pos : pos + klen].decode()
    pos += klen
    if kind is not None and got_kind != kind:
        raise DataError(f"{path}: expected a {kind!r} container, found {got_kind!r}")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos : pos + hlen])
    pos += hlen
    arrays = {}
    for e in header["arrays"]:
        start = pos + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise DataError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    meta = header.get("meta", {})
    meta["kind"] = got_kind
    return arrays, meta
