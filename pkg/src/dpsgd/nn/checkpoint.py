"""Flat binary checkpoints.

Layout, all integers little-endian::

    8 bytes   magic b"DPSGDCK1"
    4 bytes   uint32 length L of the descriptor
    L bytes   UTF-8 JSON of the ModelSpec
    8 bytes   uint64 parameter count P
    8*P bytes float64 parameter vector in layout order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from dpsgd.nn.models import ModelParams, ModelSpec

MAGIC = b"DPSGDCK1"


def to_bytes(params: ModelParams) -> bytes:
    descriptor = json.dumps(params.spec.to_dict(), sort_keys=True).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", len(descriptor)),
            descriptor,
            struct.pack("<Q", params.size),
            params.vector.astype("<f8").tobytes(),
        ]
    )


def from_bytes(data: bytes) -> ModelParams:
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    (length,) = struct.unpack_from("<I", data, 8)
    spec = ModelSpec.from_dict(json.loads(data[12 : 12 + length].decode("utf-8")))
    offset = 12 + length
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if len(data) != offset + 8 * count:
        raise ValueError(f"checkpoint truncated: expected {offset + 8 * count} bytes, got {len(data)}")
    return ModelParams(spec, np.frombuffer(data, dtype="<f8", count=count, offset=offset))


def save_checkpoint(path, params: ModelParams) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_checkpoint(path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())
