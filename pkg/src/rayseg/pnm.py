"""Minimal binary PGM/PPM reading and writing.

Only the raw variants (P5, P6) are handled. 16-bit samples are stored
big-endian as the netpbm format requires.
"""

import numpy as np


def write_pgm(path, image):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if image.dtype == np.uint8:
        maxval, data = 255, image.tobytes()
    elif image.dtype == np.uint16:
        maxval, data = 65535, image.astype(">u2").tobytes()
    else:
        raise ValueError(f"unsupported PGM dtype {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        f.write(data)


def write_ppm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM image must be HxWx3")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def _read_header(data):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path):
    """Read a P5 or P6 file; returns uint8/uint16 array (HxW or HxWx3)."""
    with open(path, "rb") as f:
        data = f.read()
    (magic, w, h, maxval), offset = _read_header(data)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = w * h * channels
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    arr = arr.astype(np.uint8 if maxval < 256 else np.uint16)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))
