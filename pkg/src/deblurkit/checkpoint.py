"""Binary checkpoint container (little-endian).

Layout: magic "FMDC", version u32, tensor count u32, then per tensor:
name length u16, UTF-8 name, rank u8, dims u32 x rank, dtype tag u8
(0 = float32, 1 = float64), raw payload. A metadata block follows:
u32 byte length, then UTF-8 key=value lines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FMDC"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    def __init__(self, offset: int, expected: int, actual: int):
        super().__init__(
            f"truncated checkpoint at byte {offset}: expected {expected} "
            f"more bytes, found {actual}")
        self.offset = offset
        self.expected = expected
        self.actual = actual


class FormatError(CheckpointError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"malformed checkpoint at byte {offset}: {message}")
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)    # name -> np.ndarray
    metadata: dict = field(default_factory=dict)   # str -> str
    version: int = VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<I", ckpt.version),
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_FOR:
            arr = arr.astype(np.float32)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(struct.pack("<B", _TAG_FOR[arr.dtype]))
        parts.append(np.ascontiguousarray(arr).astype(
            _DTYPE_TAGS[_TAG_FOR[arr.dtype]], copy=False).tobytes())
    meta = "\n".join(f"{k}={v}" for k, v in ckpt.metadata.items())
    mb = meta.encode("utf-8")
    parts.append(struct.pack("<I", len(mb)))
    parts.append(mb)
    blob = b"".join(parts)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    import os
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(self.pos, n, len(self.blob) - self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise BadMagicError(
            f"bad magic {blob[:4]!r}; not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    count = r.u32()
    tensors: dict = {}
    for _ in range(count):
        name_len = r.u16()
        at = r.pos
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(at, f"tensor name is not valid UTF-8: {e}")
        rank = r.u8()
        dims = tuple(r.u32() for _ in range(rank))
        tag = r.u8()
        if tag not in _DTYPE_TAGS:
            raise FormatError(r.pos - 1, f"unknown dtype tag {tag}")
        dt = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank \
            else dt.itemsize
        payload = r.take(nbytes)
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    meta_len = r.u32()
    at = r.pos
    try:
        meta_text = r.take(meta_len).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(at, f"metadata is not valid UTF-8: {e}")
    metadata: dict = {}
    for line in meta_text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(at, f"metadata line without '=': {line!r}")
        k, v = line.split("=", 1)
        metadata[k] = v
    return Checkpoint(tensors=tensors, metadata=metadata, version=version)
