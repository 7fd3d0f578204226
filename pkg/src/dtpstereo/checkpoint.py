from __future__ import annotations

from pathlib import Path

import torch

from dtpstereo.config import ModelConfig
from dtpstereo.errors import DataError


def save_checkpoint(path, model, prune_history=None, optimizer=None, epochs=None,
                    config_hash: str = "", metrics=None, role: str = "student") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "weights": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "model_config": model.config.to_dict(),
        "prune_history": list(prune_history or []),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epochs": dict(epochs or {}),
        "config_hash": config_hash,
        "metrics": metrics,
        "role": role,
    }, path)
    return path


def load_checkpoint(path, device="cpu"):
    """Returns ``(model, payload)``; the model is in evaluation mode."""
    from dtpstereo.model import DTPNet

    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location=device, weights_only=False)
    model = DTPNet(ModelConfig.from_dict(payload["model_config"])).to(device)
    model.load_state_dict(payload["weights"])
    return model.eval(), payload
