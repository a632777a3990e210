"""Pixel-layout conversions and binary PPM (P6) I/O."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def to_float(images: np.ndarray) -> np.ndarray:
    """``uint8 (..., H, W, 3)`` -> ``float32 (..., 3, H, W)`` in [0, 1]."""
    x = np.asarray(images, dtype=np.float32) / 255.0
    return np.moveaxis(x, -1, -3)


def to_u8(images: np.ndarray) -> np.ndarray:
    """``float (..., 3, H, W)`` -> ``uint8 (..., H, W, 3)``; values are clamped for display."""
    x = np.clip(np.moveaxis(np.asarray(images, dtype=np.float64), -3, -1), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P6 is supported")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).copy()


def tile_grid(images: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Arrange rows of equally sized ``uint8 (H, W, 3)`` images on a grey canvas."""
    rows = len(images)
    cols = max(len(r) for r in images)
    h, w, _ = images[0][0].shape
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 128, dtype=np.uint8)
    for i, row in enumerate(images):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y : y + h, x : x + w] = img
    return canvas
