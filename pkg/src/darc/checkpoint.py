"""Single-file checkpoints: config echo, weights, running residual buffers, iteration."""
from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from .network import DARCNet, ModelConfig, build_model

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Path | str, model: DARCNet, iteration: int,
                    train_config: Any = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "iteration": int(iteration),
        # state_dict carries every DAIN layer's ds_ra buffer and BN running stats
        "state_dict": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path | str) -> tuple[DARCNet, dict[str, Any]]:
    """Rebuild the model from a checkpoint; returns it in eval mode with the raw payload."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path}: missing version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    model = build_model(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
