"""Little-endian record helpers for the EEEM and ADVX file formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

from robusteval.tensor import FormatError, _read_exact


def write_u32(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<I", v))


def write_u64(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<Q", v))


def write_f64(f: BinaryIO, v: float) -> None:
    f.write(struct.pack("<d", v))


def write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    write_u32(f, len(raw))
    f.write(raw)


def read_u8(f: BinaryIO, what: str = "u8") -> int:
    return struct.unpack("<B", _read_exact(f, 1, what))[0]


def read_u32(f: BinaryIO, what: str = "u32") -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def read_u64(f: BinaryIO, what: str = "u64") -> int:
    return struct.unpack("<Q", _read_exact(f, 8, what))[0]


def read_f64(f: BinaryIO, what: str = "f64") -> float:
    return struct.unpack("<d", _read_exact(f, 8, what))[0]


def read_str(f: BinaryIO, what: str = "string", limit: int = 1 << 16) -> str:
    pos = f.tell()
    n = read_u32(f, f"{what} length")
    if n > limit:
        raise FormatError(f"{what} length {n} exceeds {limit}", pos)
    raw = _read_exact(f, n, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} is not valid UTF-8", pos + 4) from exc


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    pos = f.tell()
    got = _read_exact(f, len(magic), "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", pos)
