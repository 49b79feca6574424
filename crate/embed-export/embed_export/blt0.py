"""BLT0 tensor container.

Layout: ``b"BLT0"``, little-endian u32 rank, rank u32 dims, then the
values as little-endian f32 in row-major order.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"BLT0"


def encode_tensor(array):
    a = np.asarray(array, dtype="<f4", order="C")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode_tensor(data):
    if len(data) < 8 or data[:4] != MAGIC:
        raise ValueError("missing BLT0 magic")
    (rank,) = struct.unpack_from("<I", data, 4)
    end = 8 + 4 * rank
    if len(data) < end:
        raise ValueError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) != end + 4 * n:
        raise ValueError(f"expected {n} values, found {(len(data) - end) / 4}")
    return np.frombuffer(data, dtype="<f4", count=n, offset=end).reshape(dims)


def write_atomic(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, array):
    write_atomic(path, encode_tensor(array))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())
