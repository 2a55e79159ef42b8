"""Binary checkpoint container.

Layout (all integers little-endian uint32)::

    magic   8 bytes  b"TRJSSLCK"
    version
    config  length + UTF-8 JSON text
    count
    count x [name length, name, rank, dims..., float32 data]
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRJSSLCK"
VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dumps(arrays: dict, config: dict) -> bytes:
    out = [MAGIC, _u32(VERSION)]
    text = json.dumps(config, sort_keys=True).encode()
    out += [_u32(len(text)), text, _u32(len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode()
        arr = np.asarray(arr)
        out += [_u32(len(raw)), raw, _u32(arr.ndim)]
        out += [_u32(d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(blob: bytes) -> tuple[dict, dict]:
    if blob[:8] != MAGIC:
        raise ValueError("not a trajssl checkpoint (bad magic)")
    pos = 8

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    n = u32()
    config = json.loads(blob[pos:pos + n].decode())
    pos += n
    arrays = {}
    for _ in range(u32()):
        n = u32()
        name = blob[pos:pos + n].decode()
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    return arrays, config


def save(path, arrays: dict, config: dict):
    Path(path).write_bytes(dumps(arrays, config))


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())
