"""Binary parameter checkpoints.

Layout (little-endian throughout)::

    b"PFLL"  u32 version=1  u32 count
    count x { u16 name_len, name (utf-8), u8 tag (0=encoder, 1=decoder),
              u8 rank, rank x u32 dim, prod(dims) x f64 }
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .grad import DECODER, ENCODER, ParamSet

MAGIC = b"PFLL"
VERSION = 1
_TAGS = {ENCODER: 0, DECODER: 1}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def dumps(params: ParamSet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _TAGS[params.tags[name]], value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> ParamSet:
    view = memoryview(data)
    pos = 0

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a PFLL checkpoint (bad magic)")
    pos = 4
    version, count = read("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors, tags = {}, {}
    for _ in range(count):
        (n,) = read("<H")
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        tag, rank = read("<BB")
        if tag not in _TAG_NAMES:
            raise CheckpointError(f"bad partition tag {tag} for {name!r}")
        dims = read(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64)) * 8
        if pos + size > len(view):
            raise CheckpointError(f"truncated payload for {name!r}")
        arr = np.frombuffer(view[pos:pos + size], dtype="<f8").astype(np.float64).reshape(dims)
        pos += size
        if name in tensors:
            raise CheckpointError(f"duplicate parameter {name!r}")
        tensors[name] = arr
        tags[name] = _TAG_NAMES[tag]
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last parameter")
    return ParamSet(tensors, tags)


def save(params: ParamSet, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> ParamSet:
    return loads(Path(path).read_bytes())
