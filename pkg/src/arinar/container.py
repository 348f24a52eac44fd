"""Flat little-endian binary container shared by checkpoints and datasets.

Layout::

    magic    b"ARNR"
    version  u32
    count    u32
    count x entry:
        name_len u16, name (UTF-8)
        dtype    u8   0=f32 1=i32 2=f64 3=bytes
        rank     u8   at most 32
        dims     rank x u64
        data     prod(dims) elements, little-endian

Bytes entries (JSON config blobs) are rank 1 with ``dims = [len]``.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ARNR"
MAX_RANK = 32
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1, np.dtype("float64"): 2}
BYTES = 3


class FormatError(ValueError):
    """The byte stream is not a valid container."""


def dumps(entries: dict) -> bytes:
    """Serialize ``name -> ndarray | bytes`` in insertion order."""
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(encoded)) + encoded)
        if isinstance(value, (bytes, bytearray)):
            out.append(struct.pack("<BBQ", BYTES, 1, len(value)))
            out.append(bytes(value))
            continue
        arr = np.asarray(value)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > MAX_RANK:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds {MAX_RANK}")
        out.append(struct.pack(f"<BB{arr.ndim}Q", code, arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated: {what} needs {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> dict:
    r = _Reader(bytes(buf))
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})")
    (count,) = r.unpack("<I", "entry count")
    entries = {}
    for idx in range(count):
        (name_len,) = r.unpack("<H", f"name length of entry {idx}")
        try:
            name = r.take(name_len, f"name of entry {idx}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"entry {idx}: name is not valid UTF-8") from e
        if name in entries:
            raise FormatError(f"duplicate entry name {name!r}")
        code, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
        if rank > MAX_RANK:
            raise FormatError(f"{name!r}: rank {rank} exceeds {MAX_RANK}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        if code == BYTES:
            if rank != 1:
                raise FormatError(f"{name!r}: bytes entry must have rank 1, got {rank}")
            entries[name] = r.take(dims[0], f"data of {name!r}")
            continue
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise FormatError(f"{name!r}: unknown dtype code {code}")
        size = 1
        for d in dims:
            size *= d
        data = r.take(size * dtype.itemsize, f"data of {name!r}")
        try:
            arr = np.frombuffer(data, dtype=dtype).reshape(dims)
        except ValueError as e:  # e.g. an empty array with an absurd dimension
            raise FormatError(f"{name!r}: cannot shape data as {dims}: {e}") from e
        entries[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after {count} entries")
    return entries


def save(path, entries: dict) -> None:
    with open(path, "wb") as f:
        f.write(dumps(entries))


def load(path) -> dict:
    with open(path, "rb") as f:
        return loads(f.read())
