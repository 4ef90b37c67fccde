"""Image container plus the two on-disk formats (lossless f32 dump, PPM preview)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeMismatchError
from .ioutil import atomic_write_bytes

IMGF_MAGIC = b"IMGF"

WHITE = np.array([1.0, 1.0, 1.0])
BLACK = np.array([0.0, 0.0, 0.0])


@dataclass(frozen=True)
class RenderedImage:
    """H x W x 3 image with values in [0, 1] and the background it was composed over."""

    values: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values))
        bg = np.ascontiguousarray(np.asarray(self.background, dtype=np.float64))
        if v.ndim != 3 or v.shape[2] != 3:
            raise ShapeMismatchError(f"image must be (H, W, 3), got {v.shape}")
        if bg.shape != (3,):
            raise ShapeMismatchError("background must be a 3-vector")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("non-finite image values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise InvalidInputError("image values outside [0, 1]")
        v.flags.writeable = False
        bg.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "background", bg)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def save_imgf(path, values: np.ndarray) -> None:
    """Raw f32 dump: IMGF magic, u32 h, u32 w, h*w*3 little-endian f32."""
    values = np.asarray(values)
    h, w = values.shape[0], values.shape[1]
    payload = struct.pack("<4sII", IMGF_MAGIC, h, w)
    payload += np.ascontiguousarray(values, dtype="<f4").tobytes()
    atomic_write_bytes(path, payload)


def load_imgf(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12:
            raise InvalidInputError(f"truncated image file: {path}")
        magic, h, w = struct.unpack("<4sII", head)
        if magic != IMGF_MAGIC:
            raise InvalidInputError(f"bad magic in image file: {path}")
        data = np.frombuffer(f.read(4 * h * w * 3), dtype="<f4")
    if data.size != h * w * 3:
        raise InvalidInputError(f"truncated image payload: {path}")
    return data.reshape(h, w, 3).astype(np.float64)


def save_ppm(path, values: np.ndarray) -> None:
    """8-bit binary PPM preview (P6)."""
    values = np.asarray(values)
    h, w = values.shape[0], values.shape[1]
    bytes8 = (np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + bytes8.tobytes())
