"""Binary checkpoint format.

Layout, all integers little-endian::

    magic      5 bytes   b"MMAE1"
    version    u32       FORMAT_VERSION
    seed       u64
    cfg_len    u64       length of the JSON config snapshot
    config     cfg_len bytes (UTF-8 JSON, sorted keys)
    count      u64       number of tensor records
    records    count x { name_len u64, name bytes, rank u64, dims u64 x rank,
                         values f64 x prod(dims) }

The file must end exactly after the last record.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes

MAGIC = b"MMAE1"
FORMAT_VERSION = 1
_M_PREFIX = "adamw.m:"
_V_PREFIX = "adamw.v:"
_STEP = "adamw.step"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0


def encode(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<IQQ", FORMAT_VERSION, ckpt.seed, len(cfg)), cfg,
           struct.pack("<Q", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.array(arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        out.append(struct.pack("<Q", len(nb)))
        out.append(nb)
        out.append(struct.pack(f"<Q{a.ndim}Q", a.ndim, *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint ends early at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", r.take(4))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    seed = r.u64()
    cfg_len = r.u64()
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedCheckpointError(f"config snapshot is unreadable: {exc}") from exc
    count = r.u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u64()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedCheckpointError("tensor name is not UTF-8") from exc
        rank = r.u64()
        if rank > 32:
            raise MalformedCheckpointError(f"implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        if n * 8 > len(buf):
            raise TruncatedCheckpointError(f"shape {dims} of {name!r} exceeds the file size")
        values = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name in tensors:
            raise MalformedCheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = values
    if r.pos != len(buf):
        raise MalformedCheckpointError(f"{len(buf) - r.pos} trailing bytes after the last record")
    return Checkpoint(tensors, config, seed)


def write(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode(ckpt))


def read(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_checkpoint(path, params, state=None, config: dict | None = None, seed: int = 0) -> None:
    """Write model parameters (and optional AdamW moments) atomically."""
    tensors = {k: (v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else v)
               for k, v in params.items()}
    if state is not None:
        for k, m in state.m.items():
            tensors[_M_PREFIX + k] = m
        for k, v in state.v.items():
            tensors[_V_PREFIX + k] = v
        tensors[_STEP] = np.array(float(state.step))
    write(path, Checkpoint(tensors, dict(config or {}), int(seed)))


def load_checkpoint(path):
    """Return ``(params, state, config, seed)``; ``state`` is None if none was saved."""
    from .model import ModelParams
    from .training import AdamWState

    ck = read(path)
    params = {k: v for k, v in ck.tensors.items() if not k.startswith("adamw.")}
    state = None
    if _STEP in ck.tensors:
        state = AdamWState(
            m={k[len(_M_PREFIX):]: v.copy() for k, v in ck.tensors.items() if k.startswith(_M_PREFIX)},
            v={k[len(_V_PREFIX):]: v.copy() for k, v in ck.tensors.items() if k.startswith(_V_PREFIX)},
            step=int(ck.tensors[_STEP]),
        )
    return ModelParams.from_arrays(params), state, ck.config, ck.seed
