"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"CLIC" | version | meta_len | meta (UTF-8 JSON) |
    { name_len | name (UTF-8) | rank | dims[rank] | float32 payload }*

Records run to end of file.  Metadata is serialized with sorted keys so
the same state always produces the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .imageio import atomic_write_bytes

MAGIC = b"CLIC"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos = 12
        metadata = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        tensors: dict[str, np.ndarray] = {}
        while pos < len(buf):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(buf):
                raise DataError(f"checkpoint truncated inside tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
            tensors[name] = arr.astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc
    return metadata, tensors


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    atomic_write_bytes(path, dumps(tensors, metadata))


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf)
