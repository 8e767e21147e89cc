"""Low-level helpers for the package's binary containers.

All multi-byte fields are little-endian. Readers track their byte offset so
format errors can name the exact position that failed.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class ByteReader:
    """Sequential reader over an in-memory buffer with offset tracking."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read_bytes(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", offset=self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def read_u16(self, what: str) -> int:
        return struct.unpack("<H", self.read_bytes(2, what))[0]

    def read_u32(self, what: str) -> int:
        return struct.unpack("<I", self.read_bytes(4, what))[0]

    def read_f64_array(self, count: int, what: str) -> np.ndarray:
        raw = self.read_bytes(8 * count, what)
        return np.frombuffer(raw, dtype="<f8", count=count).astype(np.float64)

    def read_u32_array(self, count: int, what: str) -> np.ndarray:
        raw = self.read_bytes(4 * count, what)
        return np.frombuffer(raw, dtype="<u4", count=count).astype(np.int64)

    def expect_magic(self, magic: bytes) -> None:
        at = self.offset
        got = self.read_bytes(len(magic), "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=at)

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} unexpected trailing bytes",
                offset=self.offset,
            )


class ByteWriter:
    """Accumulates little-endian fields into a bytes payload."""

    def __init__(self):
        self._parts: list[bytes] = []

    def write_bytes(self, data: bytes) -> None:
        self._parts.append(data)

    def write_u16(self, value: int) -> None:
        self._parts.append(struct.pack("<H", value))

    def write_u32(self, value: int) -> None:
        self._parts.append(struct.pack("<I", value))

    def write_f64_array(self, array: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    def write_u32_array(self, array: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(array, dtype="<u4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)
