"""Versioned binary checkpoints: named f32 blobs plus optional optimizer state.

Layout: magic "SDCK", u32 version, length-prefixed config digest, u8
has-optimizer flag, u32 blob count, then per blob a length-prefixed name,
u8 ndim, u32 dims, f32 little-endian data. Optimizer state stores the step
counter, hyperparameters, and one (m, v) pair per blob in blob order.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import DigestMismatchError, InvalidInputError, MissingArtifactError
from ..ioutil import atomic_write_bytes
from .adam import AdamState

MAGIC = b"SDCK"
VERSION = 1


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    out = struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return out


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InvalidInputError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).copy()


def save_checkpoint(path, digest: str, blobs: dict, adam: AdamState | None = None) -> None:
    out = struct.pack("<4sI", MAGIC, VERSION)
    dig = digest.encode("utf-8")
    out += struct.pack("<H", len(dig)) + dig
    out += struct.pack("<B", 1 if adam is not None else 0)
    out += struct.pack("<I", len(blobs))
    for name, value in blobs.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        data = value.data if hasattr(value, "data") and isinstance(getattr(value, "data"), np.ndarray) else value
        out += _pack_array(data)
    if adam is not None:
        out += struct.pack("<Qdddd", adam.step_count, adam.lr, adam.beta1, adam.beta2, adam.eps)
        for m, v in zip(adam.m, adam.v):
            out += _pack_array(m) + _pack_array(v)
    atomic_write_bytes(path, out)


def load_checkpoint(path, expect_digest: str | None = None):
    """Returns (digest, {name: f32 array}, AdamState | None)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise MissingArtifactError(f"checkpoint not found: {path}") from None
    r = _Reader(raw)
    magic, version = r.unpack("<4sI")
    if magic != MAGIC:
        raise InvalidInputError(f"bad magic in checkpoint: {path}")
    if version != VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    (dlen,) = r.unpack("<H")
    digest = r.take(dlen).decode("utf-8")
    if expect_digest is not None and digest != expect_digest:
        raise DigestMismatchError(
            f"checkpoint digest {digest[:12]}... does not match configured architecture {expect_digest[:12]}..."
        )
    (has_opt,) = r.unpack("<B")
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        blobs[name] = r.array()
    adam = None
    if has_opt:
        step, lr, b1, b2, eps = r.unpack("<Qdddd")
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step_count=step)
        for _ in range(count):
            adam.m.append(r.array())
            adam.v.append(r.array())
    return digest, blobs, adam
