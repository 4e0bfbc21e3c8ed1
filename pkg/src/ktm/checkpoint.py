"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"KTM1" | version u32 | header_len u32 | header (UTF-8 JSON)
    | n_tensors u32
    | per tensor: name_len u32, name, dtype u8, rank u32, dims u32*rank, payload
    | CRC-64/XZ u64 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from fastcrc import crc64

from .errors import CheckpointError

MAGIC = b"KTM1"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _checksum(blob: bytes) -> int:
    return crc64.xz(blob)


def dumps(header: dict, tensors: dict) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        le = arr.dtype.newbyteorder("<")
        if le not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", _DTYPE_TAGS[le], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def loads(blob: bytes) -> tuple:
    """Verify the checksum, then decode ``(header, tensors)``."""
    if len(blob) < len(MAGIC) + 20 or blob[:4] != MAGIC:
        raise CheckpointError("not a KTM1 checkpoint")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch")
    version, head_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(body[off:off + head_len].decode("utf-8"))
    off += head_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", body, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize,
                                          offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt tensor record: {exc}") from exc
    if off != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    return header, tensors


def save(path, header: dict, tensors: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(header, tensors))
    os.replace(tmp, path)


def load(path) -> tuple:
    return loads(Path(path).read_bytes())
