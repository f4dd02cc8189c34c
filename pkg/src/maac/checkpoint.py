"""Single-file checkpoint format.

Layout (all integers little-endian)::

    b"MAACCKPT"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_arrays
    n_arrays x { u16 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)] }

The JSON header carries the configuration snapshot and scalar metadata.
Everything numeric, including generator states, is stored as float64 arrays;
64-bit generator words are bit-cast, so restoring them is exact.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"MAACCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, header: dict, arrays: Dict[str, np.ndarray]):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype != np.float64:
                raise CheckpointError(f"{name}: only float64 arrays are stored, got {arr.dtype}")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", _read(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
        header = json.loads(_read(fh, hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4))
        arrays = {}
        for _ in range(count):
            (klen,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, klen).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read(fh, 4))
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last array")
    return header, arrays


# -------------------------------------------------------- generator states

_MASK = (1 << 64) - 1


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {st['bit_generator']}")
    s, inc = st["state"]["state"], st["state"]["inc"]
    words = np.array([s & _MASK, s >> 64, inc & _MASK, inc >> 64, st["has_uint32"], st["uinteger"]],
                     dtype=np.uint64)
    return words.view(np.float64).copy()


def rng_from_array(arr) -> np.random.Generator:
    w = [int(x) for x in np.asarray(arr, dtype=np.float64).view(np.uint64)]
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
                "has_uint32": w[4], "uinteger": w[5]}
    return np.random.Generator(bg)
