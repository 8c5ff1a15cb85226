"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"GSTC"
    version u32
    config  u32 length + UTF-8 JSON blob {model, dsp, train}
    step    u64
    rng     u32 length + UTF-8 JSON blob (numpy bit-generator state)
    adam_t  u64
    count   u32
    records: u32 name length, name bytes, u32 rank, u32 per-dim extents,
             float32 data (row-major)

Records hold trainable parameters, buffers (running statistics), and the
optimizer's first/second moments (``adam.m.*`` / ``adam.v.*``). Loaded
checkpoints keep the raw blobs, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"GSTC"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    step: int
    adam_t: int
    tensors: list          # ordered (name, float32 ndarray)
    config_blob: bytes
    rng_blob: bytes

    @property
    def rng_state(self) -> dict:
        return json.loads(self.rng_blob.decode("utf-8"))

    def tensor_map(self) -> dict:
        return dict(self.tensors)


def make_checkpoint(config: dict, step: int, adam_t: int, tensors,
                    rng_state: dict) -> Checkpoint:
    return Checkpoint(
        config=config,
        step=step,
        adam_t=adam_t,
        tensors=[(n, np.ascontiguousarray(a, dtype=np.float32)) for n, a in tensors],
        config_blob=json.dumps(config, sort_keys=True).encode("utf-8"),
        rng_blob=json.dumps(rng_state, sort_keys=True).encode("utf-8"),
    )


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(ckpt.config_blob)))
        f.write(ckpt.config_blob)
        f.write(struct.pack("<Q", ckpt.step))
        f.write(struct.pack("<I", len(ckpt.rng_blob)))
        f.write(ckpt.rng_blob)
        f.write(struct.pack("<Q", ckpt.adam_t))
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint file)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    config_blob = r.take(r.u32())
    step = r.u64()
    rng_blob = r.take(r.u32())
    adam_t = r.u64()
    count = r.u32()
    tensors = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * n_items)
        tensors.append((name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()))
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor section")
    try:
        config = json.loads(config_blob.decode("utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: config blob is not valid JSON") from e
    return Checkpoint(config=config, step=step, adam_t=adam_t, tensors=tensors,
                      config_blob=bytes(config_blob), rng_blob=bytes(rng_blob))
