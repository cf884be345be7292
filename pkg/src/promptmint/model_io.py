"""Self-describing binary container for trained models.

Layout (all integers little-endian):

    bytes 0..3   magic b"PMNT"
    bytes 4..7   uint32 format version (currently 1)
    bytes 8..11  uint32 header length in bytes
    header       UTF-8 JSON: {"kind", "meta", "arrays": [{"name", "shape"}]}
    payloads     one per header array entry, in order: float64 little-endian,
                 C-contiguous

Identical inputs serialize to identical bytes (the header JSON uses sorted
keys), so seeded retraining reproduces model files bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_model", "load_model", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"PMNT"
FORMAT_VERSION = 1


def save_model(
    path: Path | str, kind: str, meta: dict, arrays: dict[str, np.ndarray]
) -> None:
    names = sorted(arrays)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": name, "shape": list(arrays[name].shape)} for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        handle.write(struct.pack("<I", len(header_bytes)))
        handle.write(header_bytes)
        for name in names:
            handle.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_model(path: Path | str) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a model container: bad magic {magic!r}")
        (version,) = struct.unpack("<I", handle.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        (header_len,) = struct.unpack("<I", handle.read(4))
        header = json.loads(handle.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            payload = handle.read(count * 8)
            if len(payload) != count * 8:
                raise ValueError(f"truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return header["kind"], header["meta"], arrays
