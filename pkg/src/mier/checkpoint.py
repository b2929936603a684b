"""Binary checkpoints: named float64 tensors behind a magic/version header.

Layout, all little-endian:
  "MIER" | version u16 | repeated records:
  name_len u16 | name utf-8 | ndim u32 | dims u32 * ndim | payload f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"MIER"
VERSION = 1


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        for name, array in tensors.items():
            arr = np.ascontiguousarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint {path} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version} (want {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        count = 1
        for d in dims:
            count *= d
        payload = take(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return tensors
