"""Portable checkpoint file.

Layout (little-endian)::

    b"MFMCKPT1" | version u32
    | n_params u32 | n_params records
    | n_opt u32    | n_opt records
    record := name_len u32 | name utf-8 | ndim u32 | dims u32 * ndim | data f32 * prod(dims)

Epoch, best validation loss and learning rate travel as scalar records in the
optimizer section under ``meta/...`` names; Adam moments use ``m/<param>``
and ``v/<param>``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MFMCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = float("inf")
    version: int = VERSION

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        _write_section(buf, self.tensors)
        opt = dict(self.optimizer)
        opt["meta/epoch"] = np.asarray(self.epoch, dtype=np.float32)
        opt["meta/best_val_loss"] = np.asarray(self.best_val_loss, dtype=np.float32)
        _write_section(buf, opt)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        buf = io.BytesIO(blob)
        if buf.read(len(MAGIC)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = _unpack(buf, "<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors = _read_section(buf)
        opt = _read_section(buf)
        epoch = int(opt.pop("meta/epoch", np.float32(0)))
        best = float(opt.pop("meta/best_val_loss", np.float32(np.inf)))
        if buf.read(1):
            raise CheckpointError("trailing bytes after optimizer section")
        return cls(tensors, opt, epoch, best, version)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def _unpack(buf, fmt):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _write_section(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _read_section(buf):
    (count,) = _unpack(buf, "<I")
    out = {}
    for _ in range(count):
        (nlen,) = _unpack(buf, "<I")
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = _unpack(buf, "<I")
        dims = _unpack(buf, f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if ndim else 1
        raw = buf.read(4 * n)
        if len(raw) != 4 * n:
            raise CheckpointError(f"truncated data for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return out
