"""Binary checkpoint format.

Layout (little-endian): b"MXAC", u32 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, u64 dims, u8 dtype code (0 = f64) and the
raw payload; finally a u32-length-prefixed UTF-8 JSON blob with the model
config and metadata.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .model import ModelConfig, MultiExitModel

MAGIC = b"MXAC"
VERSION = 1
DTYPE_F64 = 0


class CheckpointError(ValueError):
    pass


def dumps(model: MultiExitModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        buf.write(struct.pack("<B", DTYPE_F64))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    blob = json.dumps({"config": model.config.to_dict(), "meta": model.meta,
                       "stage1_complete": model.stage1_complete},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def loads(data: bytes) -> MultiExitModel:
    buf = io.BytesIO(data)

    def read(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CheckpointError("truncated checkpoint")
        return chunk

    if read(4) != MAGIC:
        raise CheckpointError("not an MXAC checkpoint")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", read(2))
        name = read(n).decode("utf-8")
        (rank,) = struct.unpack("<B", read(1))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank))
        (dtype,) = struct.unpack("<B", read(1))
        if dtype != DTYPE_F64:
            raise CheckpointError(f"unsupported dtype code {dtype}")
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(read(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    (n,) = struct.unpack("<I", read(4))
    blob = json.loads(read(n).decode("utf-8"))
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    model = MultiExitModel(ModelConfig.from_dict(blob["config"]))
    if list(tensors) != list(model.params):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    model.load_state_dict(tensors)
    model.meta = blob.get("meta", {})
    model.stage1_complete = bool(blob.get("stage1_complete", False))
    return model


def save(model: MultiExitModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path) -> MultiExitModel:
    with open(path, "rb") as fh:
        return loads(fh.read())
