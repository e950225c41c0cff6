"""Checkpoint archive.

A checkpoint is one ``torch.save`` file holding a plain dict::

    format        "awnet-checkpoint"
    version       1
    model_config  ModelConfig as a dict
    state_dict    parameter/buffer tensors keyed by hierarchical module names
    epoch         number of completed epochs
    seed          run seed
    extra         free-form metadata (val loss, train config, ...)
"""
from pathlib import Path

import torch

from .model import AttentionWNet, ModelConfig

FORMAT = "awnet-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model, epoch=0, seed=0, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "epoch": int(epoch),
        "seed": int(seed),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_config=None):
    """Return ``(model, payload)`` with the model in eval mode."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises pickle, zip and EOF errors alike
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an awnet checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = ModelConfig.from_dict(payload["model_config"])
    if expected_config is not None and expected_config != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expected_config}")
    model = AttentionWNet(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match config: {exc}") from exc
    model.eval()
    return model, payload
