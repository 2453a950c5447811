"""BMT1 binary tensor files.

Layout (little-endian): magic ``b"BMT1"``, ``u32`` rank, ``rank`` x ``u32``
extents, then the row-major ``f64`` payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"BMT1"


class FormatError(ValueError):
    pass


def encode(array) -> bytes:
    # ascontiguousarray would promote 0-d to 1-d
    arr = np.asarray(array, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != 8 * count:
        raise FormatError(f"payload holds {len(buf) - offset} bytes, shape {shape} needs {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
