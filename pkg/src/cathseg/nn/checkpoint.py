"""Model checkpoint serialization.

Binary layout, all integers and floats little-endian:

    5 bytes   magic "CATH1"
    4 bytes   uint32 length of the JSON config block
    n bytes   JSON model config (utf-8)
    ...       every state tensor (parameters and BN running statistics) in
              declaration order, raw float32 values
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelConfig, SegModel
from ..imagecore import atomic_write_bytes

MAGIC = b"CATH1"


def save_checkpoint(model: SegModel, path) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(cfg)), cfg]
    for _, arr in model.named_state():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path, dtype=np.float32) -> SegModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    if len(blob) < 9:
        raise ValueError(f"{path}: truncated checkpoint header")
    (cfg_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + cfg_len:
        raise ValueError(f"{path}: truncated config block")
    config = ModelConfig.from_dict(json.loads(blob[9:9 + cfg_len].decode("utf-8")))
    model = SegModel(config, np.random.default_rng(0), dtype=dtype)
    pos = 9 + cfg_len
    for name, arr in model.named_state():
        nbytes = arr.size * 4
        if pos + nbytes > len(blob):
            raise ValueError(f"{path}: truncated tensor data at {name!r}")
        vals = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=pos)
        arr[...] = vals.reshape(arr.shape).astype(arr.dtype)
        pos += nbytes
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return model
