"""Versioned little-endian container for network weights and datasets.

Layout::

    magic  8 bytes   b"TRAPPER\\x00"
    version uint16
    header_len uint32
    header  JSON (utf-8, sorted keys)
    payload float64 little-endian, arrays concatenated in header order

The header lists ``arrays: [{name, shape, dtype}]``; everything else in it is
free-form metadata.  Output is byte-stable for identical inputs.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"TRAPPER\x00"
VERSION = 1


def write_container(path, kind: str, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    specs = []
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr)
        dtype = "bool" if a.dtype == np.bool_ else ("int64" if a.dtype.kind in "iu" else "float64")
        conv = a.astype({"bool": "<u1", "int64": "<i8", "float64": "<f8"}[dtype])
        specs.append({"name": name, "shape": list(a.shape), "dtype": dtype})
        blobs.append(np.ascontiguousarray(conv).tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs}, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HI", VERSION, len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_container(path, kind: str | None = None) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a trapper container")
    version, hlen = struct.unpack("<HI", data[8:14])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(data[14:14 + hlen])
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind!r} file, found {header['kind']!r}")
    off = 14 + hlen
    arrays = {}
    sizes = {"bool": 1, "int64": 8, "float64": 8}
    codes = {"bool": "<u1", "int64": "<i8", "float64": "<f8"}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = n * sizes[spec["dtype"]]
        a = np.frombuffer(data[off:off + nbytes], dtype=codes[spec["dtype"]]).reshape(spec["shape"])
        if spec["dtype"] == "bool":
            a = a.astype(bool)
        else:
            a = a.astype(np.float64 if spec["dtype"] == "float64" else np.int64)
        arrays[spec["name"]] = a
        off += nbytes
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return header["meta"], arrays
