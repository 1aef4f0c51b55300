"""Deterministic on-disk artifact helpers.

All binary artifacts (dataset splits, model weights, field snapshots) use the
same container: a magic string, a length-prefixed JSON index describing each
named array, then the raw little-endian payloads in index order.  The layout
contains no timestamps, so identical data always produces identical bytes --
which is what the reproducibility manifests hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Dict

import numpy as np

MAGIC = b"MMTENS01"


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no trailing whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_tensors(path, arrays: Dict[str, np.ndarray]) -> None:
    """Write named arrays to a single deterministic binary file."""
    index = []
    payloads = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        payloads.append(data)
    header = canonical_json(index).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for data in payloads:
            fh.write(data)


def read_tensors(path) -> Dict[str, np.ndarray]:
    """Read a file written by :func:`write_tensors`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        index = json.loads(fh.read(hlen).decode("utf-8"))
        out = {}
        for entry in index:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(count * dtype.itemsize)
            out[entry["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2))
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def verify_manifest(manifest: dict, base_dir) -> list:
    """Check that every artifact referenced by a manifest exists and matches
    its recorded hash.  Returns a list of problem strings (empty when clean).
    """
    problems = []
    for rel, expected in manifest.get("artifacts", {}).items():
        full = os.path.join(base_dir, rel)
        if not os.path.exists(full):
            problems.append(f"missing artifact: {rel}")
            continue
        actual = sha256_file(full)
        if actual != expected:
            problems.append(f"hash mismatch for {rel}: {actual} != {expected}")
    return problems
