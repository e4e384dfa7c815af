"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DRFTCKPT"                 magic
    u8   version                (currently 1)
    u32  meta_len, meta bytes   UTF-8 JSON with run metadata
    u32  entry count
    per entry:
        u16 name_len, name      UTF-8
        u8  ndim, u32 * ndim    shape
        f32 * prod(shape)       row-major payload
"""

import json
import struct

import numpy as np

MAGIC = b"DRFTCKPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode(arrays, meta=None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob):
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        payload = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        arrays[name] = payload.astype(np.float32)
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return arrays, meta


def save(path, arrays, meta=None):
    blob = encode(arrays, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
