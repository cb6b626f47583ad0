"""Single-file model checkpoint format shared by all trained components.

Layout: 8-byte magic, little-endian uint32 format version, little-endian
uint64 header length, UTF-8 JSON header (kind, architecture descriptor,
seed, metadata, array manifest), then the named parameter arrays as raw
little-endian float32 in manifest order. The format is self-describing so
checkpoints stay portable across runs and languages.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MIXDCKPT"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """File is not a valid checkpoint of a supported version."""


@dataclass
class Checkpoint:
    kind: str
    architecture: dict
    seed: int
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, kind: str, architecture: dict, seed: int,
                    arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({
        "kind": kind,
        "architecture": architecture,
        "seed": int(seed),
        "meta": meta or {},
        "arrays": manifest,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack_from("<I", raw, len(MAGIC))[0]
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    header_len = struct.unpack_from("<Q", raw, len(MAGIC) + 4)[0]
    off = len(MAGIC) + 12
    header = json.loads(raw[off:off + header_len].decode("utf-8"))
    off += header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        off += 4 * count
    if off > len(raw):
        raise CheckpointFormatError(f"{path}: array payload truncated")
    return Checkpoint(kind=header["kind"], architecture=header["architecture"],
                      seed=header["seed"], meta=header["meta"], arrays=arrays)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
