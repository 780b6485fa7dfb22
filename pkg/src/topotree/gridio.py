"""Versioned little-endian binary container for voxel-grid arrays.

Layout::

    magic    8 bytes  b"TOPOGRID"
    version  u32
    dims     3 x u32
    origin   3 x f64
    w        f64
    count    u32
    count x { name_len u16, name, dtype_len u8, dtype (numpy str, e.g. "<f8"),
              ndim u8, shape ndim x u64, raw data }
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError

MAGIC = b"TOPOGRID"
VERSION = 1


def write_grid_file(path, dims, origin, w: float, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<3I", *(int(d) for d in dims)))
        fh.write(struct.pack("<3d", *(float(o) for o in origin)))
        fh.write(struct.pack("<d", float(w)))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            arr = arr.astype(dt, copy=False)
            name_b = name.encode("ascii")
            dt_b = dt.str.encode("ascii")
            fh.write(struct.pack("<H", len(name_b)) + name_b)
            fh.write(struct.pack("<B", len(dt_b)) + dt_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_grid_file(path):
    """Return ``(header, arrays)`` where header has ``dims``, ``origin``, ``w``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ParseError("not a grid file (bad magic)")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise ParseError("truncated grid file")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise ParseError(f"unsupported grid file version {version}")
    dims = take("<3I")
    origin = np.array(take("<3d"))
    (w,) = take("<d")
    (count,) = take("<I")
    arrays = {}
    for rec in range(count):
        (n,) = take("<H")
        name = data[off:off + n].decode("ascii")
        off += n
        (n,) = take("<B")
        dt = np.dtype(data[off:off + n].decode("ascii"))
        off += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(data):
            raise ParseError("truncated array data", rec + 1)
        arrays[name] = np.frombuffer(data[off:off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
    return {"version": version, "dims": tuple(int(d) for d in dims), "origin": origin, "w": w}, arrays
