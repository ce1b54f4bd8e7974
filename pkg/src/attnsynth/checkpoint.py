"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic   8 bytes  b"ATTNCKPT"
    version u32      FORMAT_VERSION
    count   u32      number of entries
    entry*  name_len u32, name utf-8, ndim u32, dims u64 * ndim, payload float64 LE

Entries keep insertion order, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"ATTNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(entries) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> "OrderedDict[str, np.ndarray]":
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(raw):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def prefixed(prefix: str, state) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((f"{prefix}.{k}", v) for k, v in state.items())


def select(prefix: str, state) -> "OrderedDict[str, np.ndarray]":
    p = prefix + "."
    return OrderedDict((k[len(p):], v) for k, v in state.items() if k.startswith(p))
