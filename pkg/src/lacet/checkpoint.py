"""Checkpoint container: magic "FSM1", version, then named tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"FSM1"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name utf-8
        dtype    u8   0 = float64, 1 = float32, 2 = uint8
        ndim     u8
        shape    u32 * ndim
        data     raw little-endian bytes, C order

Run configuration travels inside the container as a uint8 tensor named
"_meta/config" holding the flat config text.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FSM1"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.uint8): 2}

META_CONFIG = "_meta/config"


def save_checkpoint(path: str, tensors: dict[str, np.ndarray],
                    config_text: str | None = None) -> None:
    items = dict(tensors)
    if config_text is not None:
        items[META_CONFIG] = np.frombuffer(config_text.encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _CODES:
                raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], str | None]:
    """Returns (tensors, config text or None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(shape)
        off += nbytes
        tensors[name] = arr.copy()
    config_text = None
    if META_CONFIG in tensors:
        config_text = tensors.pop(META_CONFIG).tobytes().decode()
    return tensors, config_text
