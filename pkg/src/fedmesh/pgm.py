"""Binary PGM (P5) reading and writing, and nearest-neighbor resizing."""
from __future__ import annotations

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(data, count):
    """First ``count`` header tokens and the offset just past the last one."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def parse_pgm(data):
    """Decode P5 bytes to ``(pixels, maxval)``; pixels are uint8 or uint16."""
    if data[:2] != b"P5":
        raise PGMError(f"not a binary PGM (magic {data[:2]!r})")
    (w, h, maxval), pos = _tokens(data[2:], 3)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PGMError("non-numeric PGM header field") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PGMError(f"bad PGM header: {width}x{height}, maxval {maxval}")
    pos += 2 + 1  # magic, then exactly one whitespace byte before the raster
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    size = width * height * dtype.itemsize
    raster = data[pos:pos + size]
    if len(raster) != size:
        raise PGMError(f"PGM raster truncated: need {size} bytes, have {len(raster)}")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return pixels.astype(np.uint16 if maxval >= 256 else np.uint8), maxval


def read_pgm(path):
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def encode_pgm(pixels, maxval=255):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise PGMError("PGM needs a 2-D array")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n{maxval}\n".encode("ascii")
    return header + pixels.astype(dtype).tobytes()


def write_pgm(path, pixels, maxval=255):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(pixels, maxval))


def resize_nearest(image, height, width=None):
    """Output pixel (i, j) takes source (floor(i*H/height), floor(j*W/width))."""
    width = height if width is None else width
    image = np.asarray(image)
    src_h, src_w = image.shape
    rows = (np.arange(height) * src_h) // height
    cols = (np.arange(width) * src_w) // width
    return image[rows[:, None], cols[None, :]]
