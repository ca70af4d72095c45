"""Binary tensor archive used for checkpoints.

Layout (little-endian)::

    b"EAST" | version:u32 | repeated entries until EOF:
        name_len:u32 | name:utf-8 | rank:u32 | extents:u64[rank] | values:f32[prod(extents)]

Values are row-major.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"EAST"
VERSION = 1


class ArchiveError(ValueError):
    """Malformed tensor archive."""


class ArchiveVersionError(ArchiveError):
    """Archive written with an unsupported format version."""


def write_archive(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_archive(fh: BinaryIO) -> dict[str, np.ndarray]:
    data = fh.read()
    if data[:4] != MAGIC:
        raise ArchiveError("not a tensor archive (bad magic)")
    if len(data) < 8:
        raise ArchiveError("truncated archive header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ArchiveVersionError(f"archive version {version}, expected {VERSION}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ArchiveError(f"truncated archive while reading {what} at byte {pos}")
        chunk = data[pos: pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count, f"values of {name!r}"), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    return out
