"""Binary parameter checkpoints with a versioned header.

Layout (all integers little-endian uint32, floats little-endian float64):

    magic   6 bytes  b"CRCKPT"
    version uint32   currently 1
    count   uint32   number of entries
    entry*  name_len uint32, name utf-8 bytes, rows uint32, cols uint32,
            rows*cols float64 row-major values

Entries are written sorted by name, so identical parameter sets always
produce byte-identical files and round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Param

MAGIC = b"CRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params) -> None:
    """Write params (a sequence of Param or a name->array mapping) to path."""
    if isinstance(params, dict):
        items = {str(k): np.asarray(v, dtype=np.float64) for k, v in params.items()}
    else:
        items = {p.name: p.data for p in params}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name in sorted(items):
            arr = np.ascontiguousarray(items[name], dtype=np.float64)
            if arr.ndim != 2:
                raise CheckpointError(f"parameter {name!r} must be 2-D")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes(order="C"))


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into a name -> (rows, cols) float64 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        n = rows * cols * 8
        arr = np.frombuffer(blob[off : off + n], dtype="<f8").reshape(rows, cols)
        off += n
        out[name] = np.ascontiguousarray(arr)
    if off != len(blob):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return out


def restore_params(params: list[Param], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into existing params, checking names and shapes."""
    for p in params:
        if p.name not in loaded:
            raise CheckpointError(f"checkpoint is missing parameter {p.name!r}")
        arr = loaded[p.name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: checkpoint {arr.shape}, "
                f"model {p.data.shape}")
        p.value.data = arr.copy()
        p.zero_grad()
