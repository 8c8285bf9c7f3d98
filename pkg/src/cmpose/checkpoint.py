"""Binary checkpoints.

Layout (little-endian)::

    b"CMPZ1"
    u32 header length, header JSON (config, epoch, rng state; sorted keys)
    u32 record count
    per record, sorted by name:
        u16 name length, name (utf-8)
        u8 ndim, ndim x u32 dims
        float32 data
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig

MAGIC = b"CMPZ1"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]  # float32
    config: ExperimentConfig
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, epoch: int = 0, rng_state: dict | None = None) -> "Checkpoint":
        params = {name: p.data.astype(np.float32) for name, p in model.named_parameters()}
        return cls(params, model.cfg, epoch, rng_state or {})

    def build_model(self):
        from .model import CMPose

        model = CMPose(self.config, np.random.default_rng(0))
        model.load_state_dict(self.params)
        return model


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "epoch": ckpt.epoch, "rng_state": ckpt.rng_state},
        sort_keys=True,
    ).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:5] != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    pos = 5
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise ValueError(f"trailing bytes in checkpoint ({len(raw) - pos})")
    config = ExperimentConfig.from_dict(header["config"])
    return Checkpoint(params, config, header["epoch"], header["rng_state"])


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
