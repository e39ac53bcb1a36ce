"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    bytes 0..3   magic "ISCT"
    u32          format version
    u64          header length
    header       UTF-8 JSON: {"config", "train_state", "tensors": [
                     {"path", "dtype", "shape", "nbytes"}, ...]}
    payload      tensor data, concatenated in header order, little-endian
    u32          CRC32 over the payload

Tensors are written in sorted path order and the header JSON has sorted
keys, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"ISCT"
FORMAT_VERSION = 1

_DTYPES = {
    "f32": (torch.float32, "<f4"),
    "f64": (torch.float64, "<f8"),
    "i64": (torch.int64, "<i8"),
}
_TORCH_TO_NAME = {torch.float32: "f32", torch.float64: "f64", torch.int64: "i64"}


@dataclass
class Checkpoint:
    config: dict
    tensors: Dict[str, torch.Tensor]
    train_state: dict
    version: int = FORMAT_VERSION


def save_checkpoint(
    path: Union[str, Path],
    config: dict,
    tensors: Dict[str, torch.Tensor],
    train_state: dict,
) -> None:
    entries = []
    blobs = []
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        dtype_name = _TORCH_TO_NAME.get(t.dtype)
        if dtype_name is None:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for '{name}'")
        blob = t.numpy().astype(_DTYPES[dtype_name][1]).tobytes()
        entries.append(
            {
                "path": name,
                "dtype": dtype_name,
                "shape": list(t.shape),
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
    payload = b"".join(blobs)
    header = json.dumps(
        {"config": config, "train_state": train_state, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + header_len
    if header_end + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[header_end:-4]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc_stored:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors: Dict[str, torch.Tensor] = {}
    offset = 0
    for entry in header["tensors"]:
        dtype_name = entry["dtype"]
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"{path}: unknown tensor dtype '{dtype_name}'")
        torch_dtype, np_dtype = _DTYPES[dtype_name]
        nbytes = entry["nbytes"]
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload shorter than tensor index implies")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=np_dtype).copy()
        tensors[entry["path"]] = (
            torch.from_numpy(arr).to(torch_dtype).reshape(entry["shape"])
        )
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return Checkpoint(
        config=header["config"],
        tensors=tensors,
        train_state=header["train_state"],
        version=version,
    )
