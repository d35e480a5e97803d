"""Checkpoint container: one JSON header line, then raw little-endian float64
array data. Round-trips are lossless at fp64. The codebook and the per-layer
feature-map projections ride along so a checkpoint is self-contained for
inference (the report vocabulary lives in a sidecar text file).
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .attention import RandomFeatureMap
from .model import Model, ModelConfig, param_shapes
from .tensor import Tensor
from .tokenizers import Codebook

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, model: Model, codebook: Codebook, meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {name: p.data for name, p in sorted(model.p.items())}
    for i, fmap in enumerate(model.fmaps):
        arrays[f"fmap.{i}.omega"] = fmap.omega
    arrays["codebook"] = codebook.entries

    entries = [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()]
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "dtype": "<f8",
        "entries": entries,
        "trainable": sorted(model.p.keys()),
        "fmaps": [{"seed": f.seed, "orthogonal": f.orthogonal} for f in model.fmaps],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for e in entries:
            f.write(np.ascontiguousarray(arrays[e["name"]], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, Codebook, dict]:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    if config_hash(config) != header["config_hash"]:
        raise CheckpointError("config hash mismatch: checkpoint header is inconsistent")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for e in header["entries"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        arrays[e["name"]] = data.reshape(e["shape"]).copy()
        offset += size * 8
    if offset != len(blob):
        raise CheckpointError(f"checkpoint data length mismatch: {len(blob)} vs {offset}")

    expected = param_shapes(config)
    params: dict[str, Tensor] = {}
    for name in header["trainable"]:
        if name not in arrays:
            raise CheckpointError(f"missing parameter {name}")
        if tuple(arrays[name].shape) != expected[name]:
            raise CheckpointError(f"parameter {name} has shape {arrays[name].shape}, expected {expected[name]}")
        params[name] = Tensor(arrays[name], requires_grad=True)
    fmaps = [RandomFeatureMap(omega=arrays[f"fmap.{i}.omega"],
                              seed=int(header["fmaps"][i]["seed"]),
                              orthogonal=bool(header["fmaps"][i]["orthogonal"]))
             for i in range(config.n_layers)]
    codebook = Codebook(entries=arrays["codebook"])
    return Model(config, params, fmaps), codebook, header.get("meta", {})
