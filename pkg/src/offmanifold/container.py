"""MRL1 binary container.

Layout (all little-endian)::

    b"MRL1"  u32 version  u32 tag_len  tag (utf-8)  payload

The payload is a sequence of u32 counts/dims and float64 arrays written by
the helpers below; readers consume it in the same order.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"MRL1"
VERSION = 1


class ContainerError(ValueError):
    pass


class Writer:
    def __init__(self, tag: str):
        self.buf = io.BytesIO()
        t = tag.encode()
        self.buf.write(MAGIC)
        self.buf.write(struct.pack("<II", VERSION, len(t)))
        self.buf.write(t)

    def u32(self, *values: int) -> None:
        self.buf.write(struct.pack(f"<{len(values)}I", *values))

    def array(self, a: np.ndarray) -> None:
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u32(a.ndim, *a.shape)
        self.buf.write(a.tobytes())

    def string(self, s: str) -> None:
        b = s.encode()
        self.u32(len(b))
        self.buf.write(b)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    def __init__(self, data: bytes, expect_tag: str | None = None):
        self.data = data
        self.pos = 0
        if self._take(4) != MAGIC:
            raise ContainerError("bad magic: not an MRL1 container")
        version, tag_len = self.u32(2)
        if version != VERSION:
            raise ContainerError(f"unsupported MRL1 version {version}")
        self.tag = self._take(tag_len).decode()
        if expect_tag is not None and self.tag != expect_tag:
            raise ContainerError(f"expected section '{expect_tag}', found '{self.tag}'")

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError("truncated MRL1 payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int | None = None):
        """One int, or a tuple of ``n`` ints."""
        count = 1 if n is None else n
        vals = struct.unpack(f"<{count}I", self._take(4 * count))
        return vals[0] if n is None else vals

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = self.u32(ndim)
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def string(self) -> str:
        return self._take(self.u32()).decode()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ContainerError("trailing bytes after MRL1 payload")


def read_tag(data: bytes) -> str:
    return Reader(data).tag
