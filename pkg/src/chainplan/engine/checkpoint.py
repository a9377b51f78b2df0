"""Flat binary parameter checkpoints.

Layout: magic ``SKPL``, format version u32, then per parameter:
name length u32, UTF-8 name, rank u32, one u32 per extent, and the
row-major payload as little-endian float32. All integers little-endian.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Iterable

import numpy as np

from .core import EngineError, Parameter

MAGIC = b"SKPL"
VERSION = 1


class CheckpointError(EngineError):
    pass


def save_parameters(params: Iterable[Parameter], path: str) -> None:
    """Write parameters in iteration order; the write is atomic."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    for p in params:
        name = p.name.encode("utf-8")
        blob += struct.pack("<I", len(name))
        blob += name
        blob += struct.pack("<I", p.ndim)
        blob += struct.pack(f"<{p.ndim}I", *p.shape)
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_parameters(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> float32 array map."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            extents = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(extents)) if rank else 1
            end = pos + 4 * count
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            data = np.frombuffer(raw[pos:end], dtype="<f4").reshape(extents)
            out[name] = data.copy()
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def load_into(params: Iterable[Parameter], path: str) -> None:
    """Assign checkpoint values onto live parameters, matching by name."""
    stored = load_parameters(path)
    for p in params:
        if p.name not in stored:
            raise CheckpointError(f"checkpoint missing parameter {p.name!r}")
        arr = stored[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: file {arr.shape}, model {p.shape}")
        p.data = arr.astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
