"""Checkpoint directory: ``manifest.json`` (text) + ``tensors.bin`` (little-endian float32).

Each storage buffer is written once; the index lists every name that
aliases it, so shared weights come back shared.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ambert import nn
from ambert.config import ModelConfig
from ambert.errors import DataError
from ambert.params import ModelParams

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    step: int = 0
    optimizer: nn.Adam | None = None
    heads: ModelParams | None = None
    rng: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _write_group(group, params: ModelParams, chunks, index, offset):
    for key in params.keys():
        arr = np.ascontiguousarray(params.storage(key), dtype="<f4")
        index.append({
            "group": group, "key": key, "aliases": params.aliases(key),
            "shared_key": params.shared_key(key), "shape": list(arr.shape),
            "dtype": "f32", "offset": offset,
        })
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return offset


def _write_state(group, state: dict, chunks, index, offset):
    for key in sorted(state):
        arr = np.ascontiguousarray(state[key], dtype="<f4")
        index.append({"group": group, "key": key, "aliases": [key], "shared_key": None,
                      "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return offset


def save(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks, index = [], []
    off = _write_group("params", ckpt.params, chunks, index, 0)
    if ckpt.heads is not None:
        off = _write_group("heads", ckpt.heads, chunks, index, off)
    opt = None
    if ckpt.optimizer is not None:
        off = _write_state("optimizer.m", ckpt.optimizer.m, chunks, index, off)
        off = _write_state("optimizer.v", ckpt.optimizer.v, chunks, index, off)
        opt = {"hyper": ckpt.optimizer.hyper(), "step_count": ckpt.optimizer.step_count}
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant": ckpt.config.variant,
        "model_config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "has_optimizer_state": ckpt.optimizer is not None,
        "optimizer": opt,
        "rng": ckpt.rng,
        "threads": {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")},
        "history": ckpt.history,
        "meta": ckpt.meta,
        "tensors": index,
    }
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DataError(f"{directory}: not a checkpoint (missing {MANIFEST})")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed manifest ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load(directory) -> Checkpoint:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / BLOB).read_bytes()
    cfg = ModelConfig.from_dict(manifest["model_config"])
    groups: dict[str, ModelParams] = {"params": ModelParams(), "heads": ModelParams()}
    state: dict[str, dict] = {"optimizer.m": {}, "optimizer.v": {}}
    seen = set()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start, end = entry["offset"], entry["offset"] + 4 * n
        if end > len(blob):
            raise DataError(f"{directory / BLOB}: tensor {entry['key']} runs past end of file")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).astype(np.float32)
        g = entry["group"]
        if g in state:
            state[g][entry["key"]] = arr
            continue
        for name in entry["aliases"]:
            if (g, name) in seen:
                raise DataError(f"tensor name {name} appears twice in the index")
            seen.add((g, name))
            groups[g].add(name, arr, shared_key=entry["shared_key"])
    opt = None
    if manifest.get("has_optimizer_state"):
        info = manifest["optimizer"]
        opt = nn.Adam(**info["hyper"])
        opt.step_count = info["step_count"]
        opt.m = state["optimizer.m"]
        opt.v = state["optimizer.v"]
    heads = groups["heads"] if groups["heads"].keys() else None
    return Checkpoint(cfg, groups["params"], manifest["step"], opt, heads,
                      manifest.get("rng", {}), manifest.get("history", []), manifest.get("meta", {}))
