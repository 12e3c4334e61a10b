"""Versioned, kind-tagged binary container for named float64 arrays.

Layout (little endian)::

    magic "ICLC" | u16 version | u8 len + kind tag | u32 array count
    per array: u8 len + name | u8 ndim | u32 * ndim dims | f64 data (row major)
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError

MAGIC = b"ICLC"
VERSION = 1


def _short_str(s: str) -> bytes:
    raw = s.encode("ascii")
    if len(raw) > 255:
        raise ValueError(f"name too long: {s!r}")
    return struct.pack("<B", len(raw)) + raw


def pack_arrays(kind: str, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _short_str(kind), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        parts.append(_short_str(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.buf = payload
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated payload while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def short_str(self, what: str) -> str:
        (n,) = self.unpack("<B", what)
        start = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise ParseError(f"non-ascii {what}", start) from exc


def unpack_arrays(payload: bytes, expect_kind: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(payload)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    kind_pos = r.pos
    kind = r.short_str("kind tag")
    if expect_kind is not None and kind != expect_kind:
        raise ParseError(f"expected kind {expect_kind!r}, found {kind!r}", kind_pos)
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        name = r.short_str("array name")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        data = r.take(8 * size, f"data of {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(float).reshape(dims)
    if r.pos != len(payload):
        raise ParseError(f"{len(payload) - r.pos} trailing bytes", r.pos)
    return kind, arrays
