"""Minimal binary PGM (P5, 8-bit) reader and writer.

Images are exchanged with the rest of the package as float32 arrays in
[0, 1]; bytes map to k/255 so a read/write cycle is lossless for images
that came from a PGM in the first place.
"""

from __future__ import annotations

import numpy as np


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def parse_pgm(data: bytes) -> np.ndarray:
    # header = three whitespace-separated tokens after the magic,
    # '#' starts a comment running to end of line
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte before raster
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, got maxval {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return (raster.reshape(height, width).astype(np.float32)) / np.float32(255)


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + raster.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))
