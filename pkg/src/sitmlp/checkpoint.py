"""Single-file checkpoints: a JSON index followed by binary tensors.

Layout::

    b"SITC" | version:u32 | index_len:u64 | index (utf-8 JSON) | tensor blobs

The index holds ``{"tensors": [{"name", "offset", "nbytes", "shape", "dtype"}], "meta": {...}}``;
offsets are relative to the first byte after the index, and each blob is one
tensor in the engine's binary tensor format.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .engine.serialize import read_tensor, tensor_to_bytes
from .exceptions import FormatError

MAGIC = b"SITC"
VERSION = 1


def save_checkpoint(path, tensors, meta=None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        blob = tensor_to_bytes(arr)
        entries.append({"name": name, "offset": offset, "nbytes": len(blob),
                        "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(blob)
        offset += len(blob)
    index = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(index)))
        fh.write(index)
        for blob in blobs:
            fh.write(blob)


def read_index(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<IQ", head[4:])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        raw = fh.read(n)
    try:
        return json.loads(raw), 16 + n
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: corrupt index ({err})") from None


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    index, start = read_index(path)
    body = Path(path).read_bytes()[start:]
    tensors = OrderedDict()
    for entry in index["tensors"]:
        blob = body[entry["offset"]: entry["offset"] + entry["nbytes"]]
        t = read_tensor(io.BytesIO(blob))
        if list(t.shape) != entry["shape"]:
            raise FormatError(f"{path}: shape mismatch for {entry['name']}")
        tensors[entry["name"]] = t.data
    return tensors, index.get("meta", {})
