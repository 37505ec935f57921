"""Binary parameter checkpoints with a shape manifest header.

Format (little-endian, no padding):

    magic   4 bytes  b"XCKP"
    version u32      1
    count   u32      number of parameters
    count manifest entries:
        name_len u16 | name utf-8 | ndim u8 | ndim * (dim u32)
    data: for each manifest entry in order, the float64 array
          in C order, little-endian

Parameters are written sorted by name, so checkpoints of the same model are
byte-identical regardless of dict construction order.
"""

from __future__ import annotations

import struct

import numpy as np

from retrocap.errors import DataError

MAGIC = b"XCKP"
VERSION = 1


def save_params(params: dict[str, np.ndarray], path) -> None:
    names = sorted(params)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = np.asarray(params[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
        for name in names:
            f.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise DataError(f"bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 12
    shapes: list[tuple[str, tuple[int, ...]]] = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
            off += 4 * ndim
            shapes.append((name, tuple(dims)))
    except struct.error as e:
        raise DataError(f"truncated checkpoint manifest: {e}") from e
    params = {}
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        end = off + 8 * n
        if end > len(data):
            raise DataError(f"truncated checkpoint data for {name!r}")
        params[name] = np.frombuffer(
            data, dtype="<f8", count=n, offset=off
        ).reshape(dims).copy()
        off = end
    if off != len(data):
        raise DataError("trailing bytes after checkpoint data")
    return params
