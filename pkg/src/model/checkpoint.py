"""
Checkpoint I/O for SurvCausNet.

Format (format_version 1): a `torch.save` pickle-free dict
    {
      "format_version": 1,
      "d": int,
      "hyper": {HyperParams field: plain value},
      "cuts": float64 tensor (m+1,),
      "feature_mean": float64 tensor (d,),
      "feature_std": float64 tensor (d,),
      "state_dict": {parameter/buffer name: float64 tensor},
    }
Tensors are stored in float64, so a save/load round-trip is bitwise exact.
Loading uses `weights_only=True`.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import torch

from src.model.network import SurvCausNet
from src.utils.config import HyperParams
from src.utils.data_models import FeatureScaler, TimeGrid
from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def save_checkpoint(model: SurvCausNet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "d": model.d,
        "hyper": model.hyper.as_dict(),
        "cuts": model.cuts.detach().clone(),
        "feature_mean": model.feature_mean.detach().clone(),
        "feature_std": model.feature_std.detach().clone(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> SurvCausNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise DataValidationError(f"unsupported checkpoint format_version {version!r} in {path}")

    hyper = HyperParams.from_dict(payload["hyper"])
    scaler = FeatureScaler(
        mean=payload["feature_mean"].numpy(),
        std=payload["feature_std"].numpy(),
    )
    model = SurvCausNet(int(payload["d"]), TimeGrid(payload["cuts"].numpy()), hyper, scaler)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
