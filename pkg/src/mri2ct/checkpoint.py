"""Binary checkpoint container: named float32 arrays plus a JSON config.

Layout (all integers little-endian):

    bytes 0..7   magic "M2TCKPT1"
    u32          config length in bytes, then that many bytes of UTF-8 JSON
    u32          number of arrays
    per array:   u16 name length, name UTF-8, u8 ndim, ndim x u32 extents,
                 prod(extents) x float32 little-endian values

Arrays are written in dict insertion order and values as little-endian
float32, so identical inputs serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"M2TCKPT1"


def save(path, config, arrays):
    """Write ``config`` (JSON-serializable dict) and named float32 arrays."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise ValueError(f"array name too long: {name!r}")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", a.ndim))
            for e in a.shape:
                fh.write(struct.pack("<I", e))
            fh.write(a.tobytes())


def load(path):
    """Read a checkpoint; returns (config dict, dict name -> float32 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC.decode()} checkpoint")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(clen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            arrays[name] = data.astype(np.float32)
        return config, arrays
