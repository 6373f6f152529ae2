"""Checkpoint directory format.

A checkpoint is a directory holding ``manifest.json`` (versioned text: step,
configs, vocabulary, rng state, optimizer hyperparameters and a per-tensor
name/shape/offset table) and ``tensors.bin`` (raw little-endian float32
blobs).  The manifest records the SHA-256 of the blob file.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from flavars.errors import ChecksumError, CheckpointError, FingerprintError, VersionError

FORMAT_NAME = "flavars-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


@dataclass
class Checkpoint:
    step: int
    config: dict
    config_fingerprint: str
    tensors: dict[str, torch.Tensor]
    optimizer: dict | None = None
    vocab: list[str] | None = None
    rng: dict | None = None

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}


def optimizer_to_tensors(state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, meta = {}, {"param_groups": state["param_groups"], "state_keys": {}}
    for idx, entry in state["state"].items():
        keys = []
        for key, value in entry.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value, dtype=torch.float32)
            keys.append(key)
        meta["state_keys"][str(idx)] = keys
    return tensors, meta


def optimizer_from_tensors(tensors: dict[str, torch.Tensor], meta: dict) -> dict:
    state = {}
    for idx, keys in meta["state_keys"].items():
        state[int(idx)] = {k: tensors[f"optim.{idx}.{k}"].clone() for k in keys}
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    tmp_blob = path / (BLOB + ".tmp")
    hasher = hashlib.sha256()
    with open(tmp_blob, "wb") as fh:
        for name in sorted(ckpt.tensors):
            t = ckpt.tensors[name].detach().cpu()
            if t.dtype != torch.float32:
                raise CheckpointError(f"tensor {name} is {t.dtype}; checkpoints store float32 only")
            data = t.contiguous().numpy().astype("<f4", copy=False).tobytes()
            fh.write(data)
            hasher.update(data)
            table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
            offset += len(data)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "step": ckpt.step,
        "config_fingerprint": ckpt.config_fingerprint,
        "config": ckpt.config,
        "vocab": ckpt.vocab,
        "rng": ckpt.rng,
        "optimizer": ckpt.optimizer,
        "blob": BLOB,
        "blob_bytes": offset,
        "checksum": hasher.hexdigest(),
        "tensors": table,
    }
    os.replace(tmp_blob, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None, force: bool = False) -> Checkpoint:
    path = Path(path)
    mpath, bpath = path / MANIFEST, path / BLOB
    if not mpath.is_file() or not bpath.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ChecksumError(f"corrupt checkpoint manifest {mpath}: {exc}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{mpath} is not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"checkpoint version {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    blob = bpath.read_bytes()
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise ChecksumError(f"checksum mismatch for {bpath}")
    if expected_fingerprint is not None and manifest["config_fingerprint"] != expected_fingerprint and not force:
        raise FingerprintError(
            f"checkpoint config fingerprint {manifest['config_fingerprint']} != expected {expected_fingerprint}"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        raw = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(raw.astype(np.float32).reshape(entry["shape"]))
    return Checkpoint(
        step=manifest["step"],
        config=manifest["config"],
        config_fingerprint=manifest["config_fingerprint"],
        tensors=tensors,
        optimizer=manifest.get("optimizer"),
        vocab=manifest.get("vocab"),
        rng=manifest.get("rng"),
    )


def import_location_weights(model, path) -> None:
    """Load externally exported location-encoder weights (tensors named ``model.location.*``)."""
    ckpt = load_checkpoint(path)
    prefix = "location."
    state = {k[len(prefix):]: v for k, v in ckpt.model_state().items() if k.startswith(prefix)}
    if not state:
        raise CheckpointError(f"{path} holds no location-encoder tensors")
    try:
        model.location.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"location weights do not fit this encoder: {exc}") from None
