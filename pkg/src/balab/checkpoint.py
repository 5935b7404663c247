"""Named-tensor checkpoint container.

Layout (little-endian)::

    b"BALB" | version u32 | header_len u64 | header (UTF-8 JSON) | payload

The header lists each tensor's name, dtype code, shape and byte offset into
the payload, plus the model-config fingerprint and the full config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BALB"
VERSION = 1
DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "|i1", 3: "<i4"}
CODE_OF = {np.dtype(v).str.replace("=", "<"): k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    fingerprint: str
    config: dict


def _code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str if arr.dtype.itemsize > 1 else arr.dtype.str
    if key not in CODE_OF:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return CODE_OF[key]


def save_checkpoint(path, tensors: dict[str, np.ndarray], fingerprint: str, config: dict) -> None:
    entries = []
    payload = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"fingerprint": fingerprint, "config": config, "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for raw in payload:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode())
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(DTYPE_CODES[e["dtype"]])
        lo = base + e["offset"]
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(tensors, header["fingerprint"], header["config"])
