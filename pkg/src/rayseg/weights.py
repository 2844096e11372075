"""Binary weight checkpoints.

Layout (little-endian): magic ``RWTS``, u32 version, u32 entry count, then
per entry: u16 name length, UTF-8 name, u8 ndim, ndim x u32 shape, f64
values in C order. Entries are written in the caller's order, which each
model fixes via its ``params()`` method, so identical weights give identical
bytes.
"""

import struct

import numpy as np

MAGIC = b"RWTS"
VERSION = 1


def save_weights(path, named):
    """``named`` maps dotted names to arrays (or scalars)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(named)))
        for name, value in named.items():
            arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
