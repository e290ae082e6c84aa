"""Binary record format for parameter checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"SSPCKPT\\x00"
    version uint32
    count   uint32
    count x record:
        key_len uint16, key utf-8 bytes
        ndim    uint8,  ndim x uint32 dims
        data    prod(dims) x float32 (little-endian)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"SSPCKPT\x00"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def encode_records(records: Iterable[tuple[str, np.ndarray]]) -> bytes:
    records = list(records)
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for key, array in records:
        raw_key = key.encode("utf-8")
        array = np.asarray(array)
        parts.append(struct.pack("<H", len(raw_key)))
        parts.append(raw_key)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_LE_F32).tobytes())
    return b"".join(parts)


def decode_records(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic header")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (key_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            key = blob[offset : offset + key_len].decode("utf-8")
            offset += key_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, dtype=_LE_F32, count=n, offset=offset)
            offset += 4 * n
            out[key] = data.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def save_records(path: str | Path, records: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    items = records.items() if isinstance(records, Mapping) else records
    Path(path).write_bytes(encode_records(items))


def load_records(path: str | Path) -> dict[str, np.ndarray]:
    return decode_records(Path(path).read_bytes())
