"""Container for named float32 blobs behind a JSON header.

Layout: ``b"HNRD"``, a little-endian uint32 header length, the UTF-8 JSON
header, then raw little-endian float32 data. The header carries caller
metadata plus ``{"tensors": {name: {"shape", "offset", "nbytes"}}}`` with
offsets relative to the start of the data section.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"HNRD"


def save(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    index = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index[name] = {"shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    header = json.dumps({**meta, "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    meta = json.loads(raw[8 : 8 + n].decode("utf-8"))
    base = 8 + n
    tensors = {}
    for name, entry in meta.pop("tensors").items():
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype="<f4")
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float32)
    return meta, tensors
