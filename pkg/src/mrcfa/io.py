"""Binary formats.

Tensor file: ``MRCFA1`` then, per entry until end of file: u32 name length,
UTF-8 name, u32 rank, rank x u32 extents, float32 data. All integers and
floats are little-endian.

Mask file: ``MRCMASK1``, u32 H, u32 W (16-byte header), then H*W uint8
labels in row-major order.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"MRCFA1"
MASK_MAGIC = b"MRCMASK1"
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.offset = offset


def encode_tensors(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [TENSOR_MAGIC]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(int(n)) for n in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    if buf[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise FormatError(path, 0, f"bad magic {buf[:len(TENSOR_MAGIC)]!r}")
    pos = len(TENSOR_MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(path, pos, f"truncated {what}: need {n} bytes, {len(buf) - pos} left")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        start = pos
        (nlen,) = _U32.unpack(take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(path, start + 4, "name is not UTF-8") from exc
        (rank,) = _U32.unpack(take(4, "rank"))
        shape = tuple(_U32.unpack(take(4, "extent"))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * count, f"data of {name!r}"), dtype="<f4")
        if name in out:
            raise FormatError(path, start, f"duplicate entry {name!r}")
        out[name] = data.reshape(shape).astype(np.float32)
    return out


def save_tensors(path, entries: Mapping[str, np.ndarray]) -> None:
    _atomic_write(path, encode_tensors(entries))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read(), path)


def encode_mask(mask: np.ndarray) -> bytes:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {m.shape}")
    if m.size and (m.min() < 0 or m.max() > 255):
        raise ValueError("mask labels must fit in 8 bits")
    h, w = m.shape
    return MASK_MAGIC + _U32.pack(h) + _U32.pack(w) + m.astype(np.uint8).tobytes()


def decode_mask(buf: bytes, path="<bytes>") -> np.ndarray:
    if buf[:8] != MASK_MAGIC:
        raise FormatError(path, 0, f"bad magic {buf[:8]!r}")
    if len(buf) < 16:
        raise FormatError(path, len(buf), "truncated header")
    h, w = _U32.unpack(buf[8:12])[0], _U32.unpack(buf[12:16])[0]
    if len(buf) != 16 + h * w:
        raise FormatError(path, min(len(buf), 16 + h * w), f"expected {h * w} label bytes, found {len(buf) - 16}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(h, w).copy()


def save_mask(path, mask: np.ndarray) -> None:
    _atomic_write(path, encode_mask(mask))


def load_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_mask(fh.read(), path)


def _atomic_write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
