"""Binary PPM (P6, maxval 255) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PPMFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """H x W x 3 image in [0, 1] (or uint8) -> P6 bytes."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def _skip_space(buf: bytes, pos: int) -> int:
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    return pos


def _read_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    pos = _skip_space(buf, pos)
    start = pos
    while pos < len(buf) and buf[pos:pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise PPMFormatError(f"expected {what}", start)
    return int(buf[start:pos]), pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """P6 bytes -> H x W x 3 uint8 array."""
    if buf[:2] != b"P6":
        raise PPMFormatError("missing P6 magic", 0)
    pos = 2
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMFormatError("expected whitespace after magic", pos)
    w, pos = _read_int(buf, pos, "width")
    h, pos = _read_int(buf, pos, "height")
    maxval, pos = _read_int(buf, pos, "maxval")
    if w <= 0 or h <= 0:
        raise PPMFormatError(f"non-positive size {w}x{h}", pos)
    if maxval != 255:
        raise PPMFormatError(f"maxval {maxval} unsupported, need 255", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMFormatError("expected single whitespace before raster", pos)
    pos += 1
    need = w * h * 3
    if len(buf) - pos != need:
        raise PPMFormatError(f"raster has {len(buf) - pos} bytes, expected {need}", pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w, 3).copy()


def save_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def load_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file as an H x W x 3 float image in [0, 1]."""
    return decode_ppm(Path(path).read_bytes()).astype(np.float64) / 255.0


def to_nchw(images: np.ndarray) -> np.ndarray:
    """[N,]H,W,3 -> N,3,H,W."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def to_hwc(batch: np.ndarray) -> np.ndarray:
    arr = np.asarray(batch)
    if arr.ndim == 4:
        return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))
    return np.ascontiguousarray(arr.transpose(1, 2, 0))
