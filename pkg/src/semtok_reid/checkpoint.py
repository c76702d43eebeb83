"""RCKP tensor container.

Layout (little-endian)::

    b"RCKP" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 ndim | ndim x u32 dims | f64 payload
    trailing UTF-8 ``key=value`` lines (config snapshot and run metadata)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError

MAGIC = b"RCKP"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(arr.tobytes())
    for key, value in (meta or {}).items():
        if "\n" in str(value) or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be stored as a key=value line")
        parts.append(f"{key}={value}\n".encode("utf-8"))
    return b"".join(parts)


def decode(blob: bytes, path=None) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint (need {n} bytes)", offset=pos, path=path)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic", offset=0, path=path)
    version = _U32.unpack(take(4))[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=path)
    count = _U32.unpack(take(4))[0]
    tensors = {}
    for _ in range(count):
        start = pos
        name_len = _U32.unpack(take(4))[0]
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=start, path=path) from None
        ndim = _U32.unpack(take(4))[0]
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = take(8 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    meta = {}
    try:
        text = blob[pos:].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("metadata block is not UTF-8", offset=pos, path=path) from None
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"bad metadata line {line!r}", offset=pos, path=path)
        key, value = line.split("=", 1)
        meta[key] = value
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> Path:
    path = Path(path)
    blob = encode(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetError(f"cannot write checkpoint {path}: {exc.strerror}") from exc
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(blob, path)
