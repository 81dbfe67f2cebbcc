"""Checkpoint container (safetensors): float32 little-endian arrays keyed by name, plus metadata.

Parameters are stored once under their canonical name (``model/<name>``); the
shared content block appears only as ``model/shared_content.*`` and the tie is
rebuilt by constructing the model before loading.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .networks import NetworkConfig, init_model

FORMAT_VERSION = "1"


class CheckpointError(RuntimeError):
    pass


def model_tensors(model):
    return {f"model/{name}": p.detach().to(torch.float32).contiguous() for name, p in model.named_parameters()}


def save_checkpoint(path, model, optimizers=None, *, epoch=-1, train_config=None, extra=None):
    optimizers = optimizers or {}
    tensors = model_tensors(model)
    for key, opt in optimizers.items():
        tensors.update({k: t.detach().to(torch.float32).contiguous() for k, t in opt.state_tensors(f"optim/{key}").items()})
    meta = {
        "format_version": FORMAT_VERSION,
        "epoch": str(epoch),
        "master_seed": str(model.seed),
        "network_config": json.dumps(model.config.__dict__, sort_keys=True),
        "shared_tie": json.dumps(model.shared_tie),
        "optimizer_steps": json.dumps({k: o.step_count for k, o in optimizers.items()}),
    }
    if train_config is not None:
        meta["train_config"] = train_config.echo()
        meta["config_hash"] = train_config.digest()
    if extra:
        meta.update({k: str(v) for k, v in extra.items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=meta)
    return path


def read_checkpoint(path):
    """Return (tensors, metadata) without building a model."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
            tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    except Exception as exc:  # safetensors raises its own error types
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    return tensors, meta


def load_model(path, config: NetworkConfig | None = None):
    """Rebuild the model stored at ``path``; returns (model, tensors, metadata)."""
    tensors, meta = read_checkpoint(path)
    stored = NetworkConfig(**json.loads(meta["network_config"]))
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint network config {stored} does not match {config}")
    model = init_model(stored, int(meta["master_seed"]))
    names = {name for name, _ in model.named_parameters()}
    saved = {k[len("model/"):] for k in tensors if k.startswith("model/")}
    if names != saved:
        missing, extra = sorted(names - saved), sorted(saved - names)
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            t = tensors[f"model/{name}"]
            if t.shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {tuple(t.shape)} != {tuple(p.shape)}")
            p.copy_(t)
    return model, tensors, meta
