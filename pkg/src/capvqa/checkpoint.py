"""Versioned binary checkpoint container.

Layout: magic, u32 version, u64 header length, canonical JSON header, then
raw little-endian tensor blobs concatenated in sorted-key order.  The
canonical header and fixed blob order make save -> load -> save
byte-identical, which pickle/zip-based formats cannot guarantee.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CVQA"
VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "uint8": np.uint8,
    "bool": np.bool_,
}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict
    stage: str
    step: int


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, torch.Tensor],
    config: dict,
    stage: str,
    step: int,
) -> None:
    names = sorted(tensors)
    arrays = {}
    meta = {}
    offset = 0
    for name in names:
        arr = tensors[name].detach().cpu().numpy()
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        arr = np.ascontiguousarray(arr)
        arrays[name] = arr
        meta[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        offset += arr.nbytes
    header = {
        "stage": stage,
        "step": int(step),
        "config": config,
        "tensors": meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header_bytes)))
        f.write(header_bytes)
        for name in names:
            f.write(arrays[name].tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + header_len])
    blob_start = 16 + header_len
    tensors = {}
    for name, info in header["tensors"].items():
        dtype = _DTYPES[info["dtype"]]
        start = blob_start + info["offset"]
        arr = np.frombuffer(
            data, dtype=dtype, count=info["nbytes"] // np.dtype(dtype).itemsize,
            offset=start,
        ).reshape(info["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return Checkpoint(
        tensors=tensors,
        config=header["config"],
        stage=header["stage"],
        step=header["step"],
    )


def model_state_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Persistent state only; non-persistent buffers are rebuilt from config."""
    return dict(model.state_dict())


def load_into_model(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    state = {k: v for k, v in ckpt.tensors.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected tensors: {unexpected[:5]}")
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {missing[:5]}")
