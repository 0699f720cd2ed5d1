"""Little-endian binary tensor format.

Layout::

    b"SITT" | version:u32 | rank:u32 | extents:u64 * rank | dtype:u8 | row-major data
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Union

import numpy as np

from ..exceptions import FormatError
from .tensor import Tensor

MAGIC = b"SITT"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {code: dt.newbyteorder("<") for dt, code in DTYPE_CODES.items()}


def tensor_to_bytes(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", code)
    return header + np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes()


def read_tensor(stream: BinaryIO) -> Tensor:
    """Read one tensor from ``stream``, leaving it positioned after the buffer."""
    if stream.read(4) != MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = _unpack(stream, "<II")
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    shape = _unpack(stream, f"<{rank}Q") if rank else ()
    (code,) = _unpack(stream, "<B")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    buf = stream.read(count * dtype.itemsize)
    if len(buf) != count * dtype.itemsize:
        raise FormatError("truncated tensor buffer")
    data = np.frombuffer(buf, dtype=dtype).astype(dtype.newbyteorder("="))
    return Tensor(data.reshape(shape))


def _unpack(stream: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = stream.read(size)
    if len(raw) != size:
        raise FormatError("truncated tensor header")
    return struct.unpack(fmt, raw)


def tensor_from_bytes(blob: bytes) -> Tensor:
    return read_tensor(io.BytesIO(blob))


def save_tensor(path, t: Union[Tensor, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
