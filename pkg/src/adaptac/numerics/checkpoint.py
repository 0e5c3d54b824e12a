"""Binary parameter checkpoints.

Layout (all little-endian)::

    b"ADPT" | u32 version
    repeated until EOF:
        u32 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f64 payload
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"ADPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank-0 arrays rank 0
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record") from exc
    return out
