"""Checkpoint container: ``model.json`` manifest plus ``model.bin`` float32 blob.

The manifest lists every tensor (name, shape, dtype, element offset) in blob
order, the model configuration and a format version.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import EncoderConfig
from .tasks import MultiTaskModel, TaskConfig

FORMAT_VERSION = 1
MANIFEST = "model.json"
BLOB = "model.bin"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(directory: str | Path, model: MultiTaskModel, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    arrays = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        offset += arr.size
        arrays.append(arr.ravel())
    manifest = {
        "format_version": FORMAT_VERSION,
        "encoder": asdict(model.enc_cfg),
        "tasks": asdict(model.task_cfg),
        "tensors": tensors,
        "extra": extra or {},
    }
    blob = np.concatenate(arrays) if arrays else np.zeros(0, "<f4")
    tmp = directory / (BLOB + ".tmp")
    blob.astype("<f4").tofile(tmp)
    tmp.replace(directory / BLOB)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def load_checkpoint(directory: str | Path) -> MultiTaskModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    enc = EncoderConfig(**manifest["encoder"])
    tasks = TaskConfig(**manifest["tasks"])
    model = MultiTaskModel(enc, tasks)
    blob = np.fromfile(directory / BLOB, dtype="<f4")
    state = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + n > blob.size:
            raise CheckpointError(f"blob too short for tensor {entry['name']}")
        state[entry["name"]] = torch.from_numpy(blob[start:start + n].reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model
