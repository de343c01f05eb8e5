"""``VXT1`` tensor checkpoint container.

Layout (all integers little-endian uint64 unless noted)::

    b"VXT1" | count | { name_len | name (UTF-8) | rank | extents[rank]
                        | dtype tag (uint8: 1=float32, 2=float64) | raw LE values }*
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"VXT1"
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    """Serialize an ordered ``name -> ndarray`` mapping to bytes."""
    parts = [MAGIC, struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", _TAGS[dt]))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("not a VXT1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<Q")
    out = {}
    for _ in range(count):
        (n,) = take("<Q")
        name = bytes(buf[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = take("<Q")
        shape = take(f"<{rank}Q") if rank else ()
        (tag,) = take("<B")
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
