"""Binary tensor files.

CFT1 layout (all little-endian)::

    b"CFT1" | u8 rank | rank x u32 extents | prod(extents) x float32

A named-tensor container is ``u32 count`` followed by ``count`` entries of
``u16 name length | UTF-8 name | CFT1 tensor``.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"CFT1"
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    """Raised when a file does not parse as the expected format."""


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated input while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(fp: BinaryIO, array) -> None:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in a u8")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    fp.write(MAGIC)
    fp.write(_U8.pack(arr.ndim))
    for extent in arr.shape:
        if not 1 <= extent < 2**32:
            raise FormatError(f"extent {extent} not representable")
        fp.write(_U32.pack(extent))
    fp.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fp: BinaryIO) -> np.ndarray:
    magic = _read_exact(fp, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = _U8.unpack(_read_exact(fp, 1, "rank"))
    shape = tuple(_U32.unpack(_read_exact(fp, 4, "extent"))[0] for _ in range(rank))
    if any(d < 1 for d in shape):
        raise FormatError(f"zero extent in shape {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fp, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, array)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fp:
        arr = read_tensor(fp)
        if fp.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr


def write_named(fp: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    fp.write(_U32.pack(len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) >= 2**16:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        fp.write(_U16.pack(len(raw)))
        fp.write(raw)
        write_tensor(fp, arr)


def read_named(fp: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = _U32.unpack(_read_exact(fp, 4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = _U16.unpack(_read_exact(fp, 2, "name length"))
        try:
            name = _read_exact(fp, length, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not UTF-8: {exc}") from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = read_tensor(fp)
    return out


def save_named(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fp:
        write_named(fp, tensors)


def load_named(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fp:
        return read_named(fp)
