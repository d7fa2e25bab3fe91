"""Versioned binary container for named arrays plus a JSON metadata block.

Layout (all little-endian):

    bytes 0..3    magic  b"RLHM"
    bytes 4..7    uint32 format version
    bytes 8..15   uint64 header length in bytes
    header        UTF-8 JSON: {"arrays": [{name, dtype, shape, offset}...],
                               "meta": {...}}
    payload       raw array bytes, concatenated in header order

Arrays are stored as '<f8' or '<i8'.  Writing is canonical (sorted names,
sorted JSON keys), so saving a loaded checkpoint reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RLHM"
FORMAT_VERSION = 1
_HEADER_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(RuntimeError):
    pass


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "<f8"
    if arr.dtype.kind in "iub":
        return "<i8"
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def save_container(path: Path | str, arrays: dict, meta: dict) -> None:
    """Write arrays + metadata; byte-deterministic for equal inputs."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = _canonical_dtype(arr)
        blob = np.ascontiguousarray(arr.astype(dtype)).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path: Path | str):
    """Read back (arrays, meta); refuses wrong versions and truncated files."""
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint: {err}") from err
    if len(data) < _HEADER_PREFIX.size:
        raise CheckpointError("checkpoint file is truncated (no header)")
    magic, version, header_len = _HEADER_PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    header_end = _HEADER_PREFIX.size + header_len
    if len(data) < header_end:
        raise CheckpointError("checkpoint file is truncated (incomplete header)")
    try:
        header = json.loads(data[_HEADER_PREFIX.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint header: {err}") from err
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        n_bytes = n_items * dt.itemsize
        start = header_end + entry["offset"]
        end = start + n_bytes
        if end > len(data):
            raise CheckpointError(f"checkpoint file is truncated (array {entry['name']!r})")
        arrays[entry["name"]] = np.frombuffer(data[start:end], dtype=dt).reshape(shape).copy()
    return arrays, header["meta"]
