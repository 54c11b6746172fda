"""Binary image I/O: 8-bit PPM (P6) for RGB and grayscale PFM for depth."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class ImageIOError(ValueError):
    pass


def write_ppm(image, path):
    """Write an (H, W, 3) float image in [0, 1] as binary P6, maxval 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageIOError(f"expected (H, W, 3) image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    """Read binary P6 back to an (H, W, 3) float image in [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ImageIOError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise ImageIOError(f"{path}: only maxval 255 is supported, got {maxval}")
    expect = w * h * 3
    data = np.frombuffer(raw, dtype=np.uint8, count=expect, offset=pos)
    if data.size != expect:
        raise ImageIOError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(image, path):
    """Write an (H, W) float array as grayscale little-endian PFM (scale -1).

    PFM stores rows bottom-to-top.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ImageIOError(f"expected (H, W) grayscale image, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise ImageIOError(f"{path}: not a grayscale PFM file")
    try:
        w, h = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise ImageIOError(f"{path}: malformed PFM header") from None
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h)
    if data.size != w * h:
        raise ImageIOError(f"{path}: truncated pixel data")
    return data.reshape(h, w)[::-1].astype(np.float64)
