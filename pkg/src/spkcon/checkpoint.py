"""Versioned binary checkpoints.

Layout (little-endian)::

    b"SPKC"  u32 version  u64 step  u32 epoch
    params    : tensor table (float32)        query encoder weights + batch-norm stats
    optimizer : f32 momentum  f32 lr  tensor table (float32 velocities)
    state     : tensor table (float32 / int64) key encoder, queue, prototype bank
    meta      : u32 length + UTF-8 text        run configuration

A tensor table is ``u32 count`` followed by entries of
``u16 name_len, name, u8 dtype (0=f32, 1=i64), u8 ndim, ndim*u32 dims, data``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPKC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    step: int = 0
    epoch: int = 0
    params: dict = field(default_factory=dict)
    momentum: float = 0.9
    lr: float = 0.1
    velocity: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    meta: str = ""


def _write_table(f, table: dict, allow_int=False):
    f.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.asarray(arr)
        if allow_int and np.issubdtype(arr.dtype, np.integer):
            code, data = 1, arr.astype("<i8")
        else:
            code, data = 0, arr.astype("<f4")
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)) + raw)
        f.write(struct.pack("<BB", code, data.ndim))
        f.write(struct.pack(f"<{data.ndim}I", *data.shape))
        f.write(np.ascontiguousarray(data).tobytes())


def _read_table(buf: memoryview, pos: int):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos:pos + n]).decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointError(f"entry {name!r}: unknown dtype code {code}")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        table[name] = np.frombuffer(buf, dtype=dt, count=size, offset=pos).reshape(shape).copy()
        pos += size * dt.itemsize
    return table, pos


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQI", VERSION, ckpt.step, ckpt.epoch))
        _write_table(f, ckpt.params)
        f.write(struct.pack("<ff", ckpt.momentum, ckpt.lr))
        _write_table(f, ckpt.velocity)
        _write_table(f, ckpt.state, allow_int=True)
        meta = ckpt.meta.encode("utf-8")
        f.write(struct.pack("<I", len(meta)) + meta)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, step, epoch = struct.unpack_from("<IQI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    buf = memoryview(data)
    pos = 4 + 16
    params, pos = _read_table(buf, pos)
    momentum, lr = struct.unpack_from("<ff", data, pos)
    pos += 8
    velocity, pos = _read_table(buf, pos)
    state, pos = _read_table(buf, pos)
    (n,) = struct.unpack_from("<I", data, pos)
    meta = data[pos + 4:pos + 4 + n].decode("utf-8")
    return Checkpoint(step, epoch, params, momentum, lr, velocity, state, meta)
