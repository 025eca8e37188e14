"""Flat binary parameter checkpoints.

Layout (all integers little-endian):
    magic "MSDM" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | extents u64 each
                | float64 payload (row-major)

Round-trips are bit-exact; loading verifies magic and version.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"MSDM"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ContractError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            payload = f.read(8 * n)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out
