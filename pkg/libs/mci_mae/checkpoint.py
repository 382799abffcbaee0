"""
Single-file checkpoints.

Layout:

    magic     8 bytes  b"MCIMAECK"
    length    u32      byte length of the manifest
    manifest  UTF-8 JSON, keys sorted: resolved config, config hash, channel
              ids, normalization statistics and one entry per tensor
              (name, shape, dtype, offset, nbytes)
    blob      raw little-endian tensor bytes, in manifest order

Nothing time-dependent is stored, so saving a loaded checkpoint reproduces
the original file byte for byte.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from mci_mae.config import ExperimentConfig
from mci_mae.data import ChannelStats
from mci_mae.models import MultiChannelMAE

CHECKPOINT_MAGIC = b"MCIMAECK"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    """
    Raised when a checkpoint cannot be written or read back.
    """

    pass


@dataclass
class Checkpoint:
    model: MultiChannelMAE
    config: ExperimentConfig
    channel_ids: tuple[int, ...]
    channel_stats: Optional[ChannelStats] = None
    metadata: dict = field(default_factory=dict)


def _tensor_bytes(name: str, tensor: torch.Tensor) -> tuple[str, bytes]:
    if tensor.dtype not in _DTYPES:
        raise CheckpointError(f"Tensor '{name}' has unsupported dtype {tensor.dtype}")
    code = _DTYPES[tensor.dtype]
    array = tensor.detach().cpu().contiguous().numpy().astype(code, copy=False)
    return code, array.tobytes(order="C")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in ckpt.model.state_dict().items():
        code, payload = _tensor_bytes(name, tensor)
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": code,
                "offset": offset,
                "nbytes": len(payload),
            }
        )
        blobs.append(payload)
        offset += len(payload)

    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.hash,
        "channel_ids": list(ckpt.channel_ids),
        "channel_stats": ckpt.channel_stats.to_dict() if ckpt.channel_stats else None,
        "metadata": ckpt.metadata,
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for payload in blobs:
            f.write(payload)


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        data = f.read()

    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")

    start = len(CHECKPOINT_MAGIC) + 4
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    (length,) = struct.unpack_from("<I", data, len(CHECKPOINT_MAGIC))
    if len(data) < start + length:
        raise CheckpointError(f"{path}: truncated manifest")

    try:
        manifest = json.loads(data[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})")

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {manifest.get('format_version')}"
        )

    return manifest, data[start + length :]


def load_checkpoint(path: str | Path) -> Checkpoint:
    manifest, blob = read_manifest(path)

    config = ExperimentConfig.from_dict(manifest["config"])
    if config.hash != manifest["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")

    state = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor '{entry['name']}' is truncated")
        if entry["dtype"] not in _TORCH_DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']}")

        array = np.frombuffer(blob[entry["offset"] : end], dtype=entry["dtype"])
        tensor = torch.from_numpy(array.copy()).reshape(entry["shape"])
        state[entry["name"]] = tensor.to(_TORCH_DTYPES[entry["dtype"]])

    channel_ids = tuple(manifest["channel_ids"])
    model = MultiChannelMAE(config.model, channel_ids)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: tensors do not match the configured model ({e})")

    stats = manifest.get("channel_stats")
    return Checkpoint(
        model=model,
        config=config,
        channel_ids=channel_ids,
        channel_stats=ChannelStats.from_dict(stats) if stats else None,
        metadata=manifest.get("metadata") or {},
    )
