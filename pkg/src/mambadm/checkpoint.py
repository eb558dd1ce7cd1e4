"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"MAMBADM\\x01"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header
    remainder     tensor payload, float32 little-endian, row-major

The header holds ``format_version``, ``config`` (the model config),
``train_state`` (step, tokens_seen, sampler RNG state, ...), ``meta`` (free
form, e.g. the training archive manifest) and ``tensors``: a list of
``{"name", "shape", "offset", "nbytes"}`` with offsets relative to the start
of the payload. Model tensors are named by their ``state_dict`` key;
optimizer moments are ``optim.exp_avg.<param>`` / ``optim.exp_avg_sq.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import LoadError
from .model import GlomaConfig, GlomaModel, build_variant

MAGIC = b"MAMBADM\x01"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    config: GlomaConfig
    model: GlomaModel
    train_state: dict = field(default_factory=dict)
    optimizer_moments: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def optimizer_moments(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            out[f"optim.exp_avg.{names[id(p)]}"] = st["exp_avg"]
            out[f"optim.exp_avg_sq.{names[id(p)]}"] = st["exp_avg_sq"]
    return out


def restore_optimizer(model: torch.nn.Module, optimizer: torch.optim.Optimizer, moments: dict, step: int):
    params = dict(model.named_parameters())
    for name, p in params.items():
        m = moments.get(f"optim.exp_avg.{name}")
        v = moments.get(f"optim.exp_avg_sq.{name}")
        if m is None or v is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": m.clone().to(p.dtype),
            "exp_avg_sq": v.clone().to(p.dtype),
        }


def save_checkpoint(path, config: GlomaConfig, model: GlomaModel, train_state: dict | None = None,
                    optimizer_moments: dict | None = None, meta: dict | None = None) -> None:
    tensors = {k: v for k, v in model.state_dict().items()}
    tensors.update(optimizer_moments or {})
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4")
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "train_state": train_state or {},
        "meta": meta or {},
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise LoadError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported format_version {header.get('format_version')}")
    payload = data[16 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise LoadError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    config = GlomaConfig.from_dict(header["config"])
    model = build_variant(config.variant, config, seed=0)
    state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise LoadError(f"{path}: tensors do not match config: {exc}") from exc
    moments = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    return ModelCheckpoint(config, model, header["train_state"], moments, header["meta"])
