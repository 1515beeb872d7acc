"""VTB1 tensor container.

Little-endian layout::

    b"VTB1"                       magic
    u8   version (= 1)
    u32  metadata length, then that many bytes of UTF-8 JSON
    u32  tensor count
    per tensor:
        u8 name length, name bytes (ASCII)
        u8 dtype code (0 = f64, 1 = f32, 2 = u8)
        u8 rank, rank x u32 extents
        row-major payload
    u32  CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Mapping

import numpy as np

from .errors import CorruptFile, VersionMismatch

MAGIC = b"VTB1"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("uint8"): 2}
MAX_RANK = 5


def encode(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("ascii")
        if not 0 < len(raw_name) <= 255:
            raise ValueError(f"tensor name {name!r} must be 1..255 ASCII bytes")
        if arr.dtype not in CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        if arr.ndim > MAX_RANK:
            raise ValueError(f"{name!r}: rank {arr.ndim} > {MAX_RANK}")
        code = CODES[arr.dtype]
        parts.append(struct.pack("<B", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 4 + 1 + 4 + 4 + 4 or buf[:4] != MAGIC:
        raise CorruptFile("missing VTB1 magic or file too short")
    if buf[4] != VERSION:
        raise VersionMismatch(f"unsupported VTB version {buf[4]}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile("CRC32 mismatch")
    pos = 5

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CorruptFile("unexpected end of data")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    def read_bytes(n):
        nonlocal pos
        if pos + n > len(body):
            raise CorruptFile("unexpected end of data")
        out = body[pos : pos + n]
        pos += n
        return out

    (meta_len,) = read("<I")
    try:
        meta = json.loads(read_bytes(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"bad metadata: {exc}") from None
    (count,) = read("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<B")
        try:
            name = read_bytes(name_len).decode("ascii")
        except UnicodeDecodeError:
            raise CorruptFile("non-ASCII tensor name") from None
        code, rank = read("<BB")
        if code not in DTYPES or rank > MAX_RANK:
            raise CorruptFile(f"bad dtype code {code} or rank {rank}")
        shape = read(f"<{rank}I")
        dtype = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = read_bytes(n * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(body):
        raise CorruptFile("trailing bytes after last tensor")
    return tensors, meta


def write_vtb(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Write a container; returns the bytes written."""
    data = encode(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_vtb(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())
