"""Bit-exact binary tensor records.

Layout: ``b"MIST"``, version byte (1), rank (u8), rank little-endian u32
dims, then the row-major little-endian float64 payload.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Union

import numpy as np

from mist.autodiff.tensor import Tensor

MAGIC = b"MIST"
VERSION = 1


class FormatError(ValueError):
    pass


def tensor_to_bytes(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim > 255:
        raise FormatError("rank above 255 is not representable")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def read_tensor(stream: BinaryIO) -> np.ndarray:
    head = stream.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise FormatError("not a MIST tensor record")
    version, rank = head[4], head[5]
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    raw = stream.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated tensor header")
    shape = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_tensor(fh))
