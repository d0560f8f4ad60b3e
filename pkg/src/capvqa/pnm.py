"""Minimal binary PPM (P6) / PGM (P5) reader and writer.

The dataset stores images as portable pixmaps and heatmaps as portable
graymaps so everything stays inspectable without an imaging library.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got {image.shape}")
    image = image.astype(np.uint8, copy=False)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {image.shape}")
    image = image.astype(np.uint8, copy=False)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    # Header tokens: magic, width, height, maxval; '#' comments allowed.
    tokens: list[int] = []
    pos = len(magic)
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h, maxval, pos


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, _, pos = _read_header(data, b"P6")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, _, pos = _read_header(data, b"P5")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return pixels.reshape(h, w).copy()
