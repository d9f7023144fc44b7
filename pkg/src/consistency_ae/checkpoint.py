"""Checkpoint container.

Binary layout (all integers little-endian)::

    magic           8 bytes   b"CAECKPT\\x00"
    schema_version  u32
    meta_len        u32
    meta            meta_len bytes of UTF-8 JSON
    n_arrays        u32
    n_arrays times:
        name_len    u16
        name        name_len bytes of UTF-8
        dtype       u8        0 = float32, 1 = float64, 2 = int64, 3 = uint8
        ndim        u8
        shape       ndim x u64
        data        raw little-endian values, C order

The metadata record holds at least ``schema_version``, ``config`` (the full
run config), ``config_hash`` and ``k`` (iteration counter).  Array names are
prefixed ``params/``, ``ema/`` or ``opt/``.  Training checkpoints are
float32; float64 is accepted so double-precision test models round-trip.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CAECKPT\x00"
SCHEMA_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Atomically write ``arrays`` and ``meta`` to ``path``."""
    meta = dict(meta, schema_version=SCHEMA_VERSION)
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", SCHEMA_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", raw, 8)
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
        pos = 16
        meta = json.loads(raw[pos : pos + meta_len])
        pos += meta_len
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            dtype = _DTYPES[code]
            count = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
            pos += count * dtype.itemsize
    except (struct.error, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return arrays, meta


def latest_checkpoint(directory) -> Path | None:
    ckpts = sorted(Path(directory).glob("ckpt_*.cae"))
    return ckpts[-1] if ckpts else None


def checkpoint_name(k: int) -> str:
    return f"ckpt_{k:09d}.cae"
