"""FTR1 float raster container.

Layout: ``b"FTR1"``, u32 LE rank, ``rank`` u32 LE dims, then float32 LE
row-major payload.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FTR1"


def encode(array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(buf):
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not an FTR1 raster (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated FTR1 header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"FTR1 payload size {len(buf) - off} does not match dims {dims}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.reshape(dims).astype(np.float32)


def atomic_write_bytes(path, payload):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path, array):
    atomic_write_bytes(path, encode(array))


def load(path):
    return decode(Path(path).read_bytes())
