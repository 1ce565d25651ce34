"""Flat binary parameter checkpoints.

Layout (all integers little-endian)::

    b"M3OB" | version:u32
    repeated until EOF:
        name_len:u32 | name:utf-8 | rank:u32 | dims:u32*rank | payload:f64*prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"M3OB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an M3OB checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    return out


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
