"""Checkpoint directories: ``manifest.json`` plus one raw little-endian blob.

manifest.json::

    {"format": "sdrformer-checkpoint", "version": 1,
     "config": {...model config...},
     "meta": {...free-form...},
     "tensors": {name: {"shape": [...], "dtype": "float32", "blob": "tensors.bin",
                        "offset": 0}}}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .siamese import SDRFormer, SDRFormerConfig

FORMAT = "sdrformer-checkpoint"
BLOB = "tensors.bin"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: SDRFormerConfig
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    extra: dict[str, torch.Tensor] = field(default_factory=dict)  # e.g. optimizer moments

    @classmethod
    def from_model(cls, model: SDRFormer, meta: dict | None = None) -> "Checkpoint":
        state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        return cls(model.cfg, state, dict(meta or {}))

    def build_model(self) -> SDRFormer:
        model = SDRFormer(self.config)
        model.load_state_dict(self.tensors)
        return model

    def save(self, directory: str | os.PathLike) -> Path:
        return save_checkpoint(self, directory)


def _write_tensors(fh, tensors: dict[str, torch.Tensor], table: dict, offset: int) -> int:
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        table[name] = {"shape": list(arr.shape), "dtype": dtype, "blob": BLOB, "offset": offset}
        fh.write(data)
        offset += len(data)
    return offset


def save_checkpoint(ckpt: Checkpoint, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    table, extra_table = {}, {}
    with open(d / BLOB, "wb") as fh:
        offset = _write_tensors(fh, ckpt.tensors, table, 0)
        _write_tensors(fh, ckpt.extra, extra_table, offset)
    manifest = {"format": FORMAT, "version": 1, "config": ckpt.config.to_dict(),
                "meta": ckpt.meta, "tensors": table, "extra": extra_table}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def _read_tensors(blob: bytes, table: dict, where: Path) -> dict[str, torch.Tensor]:
    out = {}
    for name, entry in table.items():
        try:
            dtype = np.dtype(_DTYPES[entry["dtype"]])
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{where}: bad table entry for {name}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + count * dtype.itemsize > len(blob):
            raise CheckpointError(f"{where}: tensor {name} runs past the end of {BLOB}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    return out


def load_checkpoint(directory: str | os.PathLike) -> Checkpoint:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{d}: unreadable manifest.json ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{d}: not an {FORMAT} directory")
    try:
        blob = (d / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{d}: missing {BLOB}") from exc
    try:
        config = SDRFormerConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{d}: bad config ({exc})") from exc
    tensors = _read_tensors(blob, manifest.get("tensors", {}), d)
    extra = _read_tensors(blob, manifest.get("extra", {}), d)
    return Checkpoint(config, tensors, manifest.get("meta", {}), extra)
