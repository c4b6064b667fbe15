"""Binary 8-bit PPM (P6) and PGM (P5) reading and writing."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]


class NetpbmError(ValueError):
    pass


def _parse_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if data[:2] != magic:
        raise NetpbmError(f"{path}: bad magic {data[:2]!r}, expected {magic!r}")
    fields: list[int] = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        if pos >= n:
            raise NetpbmError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise NetpbmError(f"{path}: unterminated comment in header")
            pos = end + 1
        else:
            start = pos
            while pos < n and data[pos : pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise NetpbmError(f"{path}: unexpected byte {ch!r} in header")
            fields.append(int(data[start:pos]))
    if pos >= n or not data[pos : pos + 1].isspace():
        raise NetpbmError(f"{path}: missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetpbmError(f"{path}: invalid size {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"{path}: only 8-bit files (maxval 255) are supported, got {maxval}")
    return width, height, pos + 1


def _read(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: no such file") from None
    width, height, offset = _parse_header(data, magic, path)
    expected = width * height * channels
    body = data[offset : offset + expected]
    if len(body) != expected:
        raise NetpbmError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def read_ppm(path: PathLike) -> np.ndarray:
    """``(H, W, 3)`` uint8."""
    return _read(path, b"P6", 3)


def read_pgm(path: PathLike) -> np.ndarray:
    """``(H, W)`` uint8."""
    return _read(path, b"P5", 1)


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise NetpbmError(f"write_ppm: need (H,W,3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes())


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise NetpbmError(f"write_pgm: need (H,W) uint8, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray).tobytes())


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
