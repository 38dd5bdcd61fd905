"""Checkpoint container: flat binary blob per tensor plus a JSON manifest.

Layout:  magic "FINDCKPT1" | uint64-le manifest length | manifest JSON | blob.
The manifest lists {name, shape, dtype, offset} per tensor (offsets into the
blob region) and carries an arbitrary JSON ``extra`` payload for metadata
such as the model's instance table.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FINDCKPT1"
_DTYPES = {"float64": np.float64, "int64": np.int64}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            arr = arr.astype(np.float64)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "extra": extra or {}},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint header "
                              f"(expected {MAGIC.decode()!r})")
    (mlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    mstart = len(MAGIC) + 8
    manifest = json.loads(data[mstart:mstart + mlen].decode("utf-8"))
    blob = data[mstart + mlen:]
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count,
                            offset=entry["offset"]).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return tensors, manifest.get("extra", {})
