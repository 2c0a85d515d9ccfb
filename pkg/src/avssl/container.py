"""Single-file binary container: JSON header plus checksummed raw arrays.

Byte layout::

    0   8 bytes   magic  b"AVSSLC01"
    8   8 bytes   header length H, unsigned little-endian
    16  H bytes   header, UTF-8 JSON (keys sorted)
    16+H 32 bytes SHA-256 of the header bytes
    ...           payload sections, back to back, in header order

The header is ``{"meta": {...}, "sections": [{"name", "dtype", "shape",
"offset", "nbytes", "sha256"}, ...]}``. ``offset`` is relative to the start of
the payload area. Arrays are stored C-contiguous in the little-endian dtype
named by ``dtype`` (``<f4``, ``<f8`` or ``<i8``).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVSSLC01"
_DTYPES = {"<f4", "<f8", "<i8"}


class ContainerError(ValueError):
    """Raised for truncated, corrupt or malformed container files."""


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    sections = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for section {name!r}")
        raw = arr.astype(dtype, copy=False).tobytes()
        sections.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "sections": sections}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(hashlib.sha256(header).digest())
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; nothing is returned unless every check passes."""
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic or truncated preamble")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    hend = 16 + hlen
    if len(buf) < hend + 32:
        raise ContainerError(f"{path}: truncated header")
    header = buf[16:hend]
    if hashlib.sha256(header).digest() != buf[hend : hend + 32]:
        raise ContainerError(f"{path}: header checksum mismatch")
    doc = json.loads(header)
    base = hend + 32
    arrays: dict[str, np.ndarray] = {}
    for sec in doc["sections"]:
        start = base + sec["offset"]
        raw = buf[start : start + sec["nbytes"]]
        if len(raw) != sec["nbytes"]:
            raise ContainerError(f"{path}: section {sec['name']!r} truncated")
        if hashlib.sha256(raw).hexdigest() != sec["sha256"]:
            raise ContainerError(f"{path}: section {sec['name']!r} checksum mismatch")
        arrays[sec["name"]] = np.frombuffer(raw, dtype=sec["dtype"]).reshape(sec["shape"]).copy()
    expected_end = base + sum(sec["nbytes"] for sec in doc["sections"])
    if len(buf) != expected_end:
        raise ContainerError(f"{path}: {len(buf) - expected_end} unexpected trailing bytes")
    return doc["meta"], arrays
