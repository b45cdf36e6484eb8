"""Little-endian binary records for tensors, strings and u32 arrays.

Tensor layout: ``b"PTNS"``, u32 version (=1), u32 rank, u64 dims[rank],
f64 data[prod(dims)].
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"PTNS"
TENSOR_VERSION = 1


class FormatError(ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Reader:
    """Bounds-checked cursor over a bytes buffer."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated input while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what="u8") -> int:
        return self.take(1, what)[0]

    def u32(self, what="u32") -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what="u64") -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what="string") -> str:
        n = self.u32(what + " length")
        start = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid UTF-8 in {what}", start) from None

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def read_tensor(r: Reader) -> np.ndarray:
    start = r.pos
    if r.take(4, "tensor magic") != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", start)
    vpos = r.pos
    version = r.u32("tensor version")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", vpos)
    rank = r.u32("tensor rank")
    dims = [r.u64("tensor dim") for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(r.take(8 * count, "tensor data"), dtype="<f8")
    return data.reshape(dims).astype(np.float64)


def pack_u32_array(values) -> bytes:
    arr = np.ascontiguousarray(values, dtype="<u4").ravel()
    return struct.pack("<Q", arr.size) + arr.tobytes()


def read_u32_array(r: Reader) -> np.ndarray:
    n = r.u64("u32 array length")
    return np.frombuffer(r.take(4 * n, "u32 array"), dtype="<u4").astype(np.int64)


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(pack_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        r = Reader(f.read())
    arr = read_tensor(r)
    if not r.at_end():
        raise FormatError("trailing bytes after tensor", r.pos)
    return arr


def write_tensor(f: BinaryIO, arr):
    f.write(pack_tensor(arr))
