"""Self-describing binary container shared by dataset and checkpoint files.

Layout: magic bytes, u16 version, then format-specific binary sections,
then a trailing UTF-8 ``key=value`` text block. All integers are
little-endian; float payloads are raw little-endian float64 so round trips
are bit-exact. Readers track the byte offset and report it on failure.
"""

from __future__ import annotations

import struct

import numpy as np

VERSION = 1

DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPE_TAGS.items()}


class FileFormatError(ValueError):
    """Malformed or truncated container file."""


class Reader:
    def __init__(self, blob: bytes, path: str = "<bytes>"):
        self.blob = blob
        self.offset = 0
        self.path = path

    def fail(self, message: str):
        raise FileFormatError(f"{self.path}: {message} at byte {self.offset}")

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            self.fail(f"truncated: needed {n} bytes, have {len(self.blob) - self.offset}")
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def magic(self, expected: bytes):
        got = self.take(len(expected))
        if got != expected:
            self.offset -= len(expected)
            self.fail(f"bad magic {got!r}, expected {expected!r}")
        version = self.u16()
        if version != VERSION:
            self.offset -= 2
            self.fail(f"unsupported version {version}")

    def array(self) -> np.ndarray:
        tag = self.u8()
        if tag not in DTYPE_TAGS:
            self.offset -= 1
            self.fail(f"unknown dtype tag {tag}")
        dtype = DTYPE_TAGS[tag]
        rank = self.u8()
        shape = tuple(self.u64() for _ in range(rank))
        count = 1
        for extent in shape:
            count *= extent
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    def text_block(self) -> dict[str, str]:
        text = self.take(len(self.blob) - self.offset).decode("utf-8")
        fields: dict[str, str] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            if "=" not in line:
                self.fail(f"malformed text line {line!r}")
            key, value = line.split("=", 1)
            if key in fields:
                self.fail(f"duplicate key {key!r}")
            fields[key] = value
        return fields


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def magic(self, tag: bytes):
        self.parts.append(tag)
        self.parts.append(struct.pack("<H", VERSION))

    def u8(self, v: int):
        self.parts.append(bytes([v]))

    def u16(self, v: int):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def array(self, arr: np.ndarray):
        arr = np.ascontiguousarray(arr)
        dtype = np.dtype("<f8") if arr.dtype.kind == "f" else np.dtype("<i8")
        self.u8(DTYPE_CODES[dtype])
        self.u8(arr.ndim)
        for extent in arr.shape:
            self.parts.append(struct.pack("<Q", extent))
        self.parts.append(arr.astype(dtype).tobytes())

    def text_block(self, fields: dict[str, str]):
        lines = []
        for key, value in fields.items():
            if "\n" in value:
                raise ValueError(f"text value for {key!r} may not contain newlines")
            lines.append(f"{key}={value}")
        self.parts.append("\n".join(lines).encode("utf-8"))

    def tobytes(self) -> bytes:
        return b"".join(self.parts)


def fmt_float(x: float) -> str:
    """repr round-trips float64 exactly."""
    return repr(float(x))


def fmt_ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def fmt_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def parse_ints(text: str) -> np.ndarray:
    if text == "":
        return np.zeros(0, dtype=np.int64)
    return np.array([int(v) for v in text.split(",")], dtype=np.int64)


def parse_floats(text: str) -> np.ndarray:
    if text == "":
        return np.zeros(0, dtype=np.float64)
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)
