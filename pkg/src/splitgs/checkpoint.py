"""Binary container for named arrays plus JSON metadata.

Layout (all integers little-endian)::

    8 bytes   magic  b"SPLITGS\\0"
    4 bytes   uint32 format version
    8 bytes   uint64 header length
    header    UTF-8 JSON: {"arrays": [{name, shape, dtype, offset, nbytes}], "meta": {...}}
    payload   arrays back to back, offsets relative to payload start, 8-byte aligned

Floating arrays are stored as little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SPLITGS\x00"
VERSION = 1
_DTYPES = {"f4": "<f4", "i8": "<i8", "u1": "u1"}


class CheckpointError(ValueError):
    pass


def _storage_dtype(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f4"
    if arr.dtype.kind in "iub" and arr.dtype.itemsize == 1 and arr.dtype.kind != "i":
        return "u1"
    if arr.dtype.kind in "iu":
        return "i8"
    raise CheckpointError(f"cannot store arrays of dtype {arr.dtype}")


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Atomically write ``arrays`` and ``meta`` (temp file in the target directory, then rename)."""
    descriptors, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _storage_dtype(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        pad = (-offset) % 8
        if pad:
            chunks.append(b"\x00" * pad)
            offset += pad
        descriptors.append({"name": name, "shape": list(arr.shape), "dtype": code,
                            "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"arrays": descriptors, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes; expected version {VERSION} container)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    if len(raw) < 20 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    base = 20 + hlen
    arrays = {}
    for d in header["arrays"]:
        start = base + d["offset"]
        if start + d["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated payload for array {d['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[d["dtype"]], count=int(np.prod(d["shape"], dtype=np.int64)),
                            offset=start).reshape(d["shape"])
        arrays[d["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]
