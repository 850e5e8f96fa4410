"""Versioned flat binary checkpoint format for :class:`ModelParams`.

Layout (all integers little-endian)::

    b"IRSP"               magic
    u32 version           currently 1
    u32 n                 length of the JSON net config that follows
    n bytes               NetConfig as UTF-8 JSON
    u32 n_blocks          1 shallow + N_f deep blocks, in that order
    per block:
        u16 len, name     block name ("shallow", "deep0", ...)
        u32 n_arrays
        per array:
            u16 len, name     parameter name ("conv1.w", "bn1.mean", ...)
            u8  dtype         0 = float64, 1 = float32
            u8  ndim
            u32 * ndim        shape
            raw data          C order, little-endian
"""

import dataclasses
import io
import json
import struct

import numpy as np

from .model import ModelParams, NetConfig

MAGIC = b"IRSP"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def _write_str(buf, s):
    b = s.encode()
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _read_exact(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def _read_str(buf):
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode()


def params_to_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = json.dumps(dataclasses.asdict(params.config), sort_keys=True).encode()
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    blocks = list(params.blocks())
    buf.write(struct.pack("<I", len(blocks)))
    for name, blk in blocks:
        _write_str(buf, name)
        buf.write(struct.pack("<I", len(blk)))
        for key, arr in blk.items():
            arr = np.asarray(arr)
            _write_str(buf, key)
            buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ModelParams:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise ValueError("not a parameter checkpoint")
    version, n = struct.unpack("<II", _read_exact(buf, 8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    raw = json.loads(_read_exact(buf, n))
    for k in ("max_pool", "avg_pool"):
        if raw.get(k) is not None:
            raw[k] = tuple(raw[k])
    cfg = NetConfig(**raw)
    (n_blocks,) = struct.unpack("<I", _read_exact(buf, 4))
    blocks = []
    for _ in range(n_blocks):
        _read_str(buf)
        (n_arr,) = struct.unpack("<I", _read_exact(buf, 4))
        blk = {}
        for _ in range(n_arr):
            key = _read_str(buf)
            code, ndim = struct.unpack("<BB", _read_exact(buf, 2))
            shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
            dt = _DTYPES[code]
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(_read_exact(buf, count * dt.itemsize), dtype=dt).reshape(shape)
            blk[key] = arr.astype(dt.newbyteorder("="), copy=True)
        blocks.append(blk)
    return ModelParams(cfg, blocks[0], blocks[1:])


def save_params(params: ModelParams, path):
    with open(path, "wb") as f:
        f.write(params_to_bytes(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        return params_from_bytes(f.read())
