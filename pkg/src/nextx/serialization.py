"""Self-describing binary container for tensors plus JSON metadata.

Layout (all integers little-endian):

    bytes 0..7    magic ``NXCONT01``
    bytes 8..15   uint64 header length in bytes
    header        canonical JSON (sorted keys, no whitespace), utf-8
    payload       raw tensor bytes, concatenated in header order

The header holds ``{"meta": <caller dict>, "tensors": {name: {"dtype",
"shape", "offset", "nbytes"}}}`` with offsets relative to the payload start.
Tensors are stored sorted by name and row-major, so identical inputs always
produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"NXCONT01"

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def save_container(path: str | Path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        if t.dtype not in _DTYPE_NAMES:
            raise ValueError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        blob = t.numpy().tobytes()
        entries[name] = {
            "dtype": _DTYPE_NAMES[t.dtype],
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a container file (magic {magic!r})")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, torch.Tensor] = {}
    for name, entry in header["tensors"].items():
        dtype = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=str(np.dtype(entry["dtype"]))).copy()
        tensors[name] = torch.from_numpy(arr).to(dtype).reshape(entry["shape"])
    return header["meta"], tensors
