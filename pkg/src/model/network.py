"""
SurvCaus Network — Representation φ, Treatment-Conditioned Head Ψ, Softmax Survival.

Architecture:
  x ──z-score──► φ: d → w → … → z   (ReLU after every layer)
  [φ(x), t] ──► Ψ: z+1 → w → … → m  (ReLU on hidden layers, linear output)

The head emits m logits ψ_1..ψ_m. The (m+1)-th logit is fixed at 0 and never
stored, so
    σ_k = exp(ψ_k) / (1 + Σ_j exp(ψ_j)),   σ_{m+1} = 1 / (1 + Σ_j exp(ψ_j))
which is a log-softmax over [ψ, 0] computed with the max-subtraction trick.

Survival at the cut points:
    F̄(τ_j) = Σ_{k > j} σ_k        (F̄(τ_0) = 1)
and continuous-time curves come from data_models.interpolate_survival.

The network owns the grid cuts and the feature mean/std as buffers, so a
checkpoint is enough to predict on raw covariates.
"""
from __future__ import annotations

import logging
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from src.utils.config import HyperParams
from src.utils.data_models import (
    DiscreteSurvivalOutput, FeatureScaler, Interpolation, TimeGrid, interpolate_survival,
)

logger = logging.getLogger(__name__)

torch.set_default_dtype(torch.float64)


def _mlp(dims: list[int], final_activation: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(fan_in, fan_out, dtype=torch.float64))
        if final_activation or i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def probs_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """(…, m) head logits → (…, m+1) probabilities with the implicit zero logit appended."""
    return torch.exp(log_probs_from_logits(logits))


def log_probs_from_logits(logits: torch.Tensor) -> torch.Tensor:
    zeros = torch.zeros(logits.shape[:-1] + (1,), dtype=logits.dtype)
    return torch.log_softmax(torch.cat([logits, zeros], dim=-1), dim=-1)


def survival_from_probs(probs: torch.Tensor) -> torch.Tensor:
    """(n, m+1) probabilities → (n, m+1) survival at τ_0..τ_m."""
    tail = torch.flip(torch.cumsum(torch.flip(probs, dims=[-1]), dim=-1), dims=[-1])
    values = tail.clone()
    values[..., 0] = 1.0
    return values


class SurvCausNet(nn.Module):
    def __init__(
        self,
        d: int,
        grid: TimeGrid,
        hyper: HyperParams,
        scaler: Optional[FeatureScaler] = None,
    ):
        super().__init__()
        self.d = d
        self.hyper = hyper
        self.m = grid.m
        width, z = hyper.hidden_width, hyper.z_dim

        phi_dims = [d] + [width] * (hyper.phi_depth - 1) + [z]
        psi_dims = [z + 1] + [width] * hyper.psi_depth + [grid.m]
        self.phi = _mlp(phi_dims, final_activation=True)
        self.psi = _mlp(psi_dims, final_activation=False)

        scaler = scaler or FeatureScaler(mean=np.zeros(d), std=np.ones(d))
        self.register_buffer("cuts", torch.as_tensor(grid.cuts, dtype=torch.float64))
        self.register_buffer("feature_mean", torch.as_tensor(scaler.mean, dtype=torch.float64))
        self.register_buffer("feature_std", torch.as_tensor(scaler.std, dtype=torch.float64))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.cuts.numpy())

    def reset_parameters(self, seed: int) -> None:
        """Xavier-normal weights, zero biases, reproducible for a given seed."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    nn.init.xavier_normal_(module.weight)
                    nn.init.zeros_(module.bias)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.feature_mean) / self.feature_std

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """φ on raw covariates (z-scored internally)."""
        return self.phi(self.normalize(x))

    def head(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = t.to(z.dtype).reshape(-1, 1)
        return self.psi(torch.cat([z, t], dim=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Head logits (n, m)."""
        return self.head(self.embed(x), t)

    def head_parameters(self) -> list[nn.Parameter]:
        return list(self.psi.parameters())


def init_params(
    d: int,
    grid: TimeGrid,
    hyper: HyperParams,
    seed: Optional[int] = None,
    scaler: Optional[FeatureScaler] = None,
) -> SurvCausNet:
    model = SurvCausNet(d, grid, hyper, scaler)
    model.reset_parameters(hyper.seed if seed is None else seed)
    return model


# ── numpy-facing prediction API ───────────────────────────────────────────────

def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _treatment(t: Union[int, np.ndarray], n: int) -> torch.Tensor:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    return torch.as_tensor(np.ascontiguousarray(t))


@torch.no_grad()
def embed(model: SurvCausNet, x: np.ndarray) -> np.ndarray:
    x = _as_tensor(x)
    single = x.ndim == 1
    z = model.embed(x.reshape(1, -1) if single else x)
    return z[0].numpy() if single else z.numpy()


@torch.no_grad()
def pmf_matrix(model: SurvCausNet, x: np.ndarray, t: Union[int, np.ndarray]) -> np.ndarray:
    """(n, m+1) bin probabilities."""
    x = _as_tensor(np.atleast_2d(x))
    return probs_from_logits(model(x, _treatment(t, x.shape[0]))).numpy()


@torch.no_grad()
def survival_knots(model: SurvCausNet, x: np.ndarray, t: Union[int, np.ndarray]) -> np.ndarray:
    """(n, m+1) survival at the cut points."""
    x = _as_tensor(np.atleast_2d(x))
    return survival_from_probs(probs_from_logits(model(x, _treatment(t, x.shape[0])))).numpy()


def predict_pmf(model: SurvCausNet, x: np.ndarray, t: int) -> DiscreteSurvivalOutput:
    return DiscreteSurvivalOutput(pmf_matrix(model, np.asarray(x).reshape(1, -1), t)[0])


def predict_survival(model: SurvCausNet, x: np.ndarray, t: int, k: int) -> float:
    """Tail mass strictly after bin k (1 at k=0, 0 at k=m+1)."""
    return predict_pmf(model, x, t).survival(k)


def survival_matrix(
    model: SurvCausNet,
    x: np.ndarray,
    t: Union[int, np.ndarray],
    times: np.ndarray,
    mode: Interpolation | str = Interpolation.LINEAR,
) -> np.ndarray:
    """(n, len(times)) interpolated survival."""
    knots = survival_knots(model, x, t)
    return interpolate_survival(model.cuts.numpy(), knots, times, mode)


def cate_matrix(
    model: SurvCausNet,
    x: np.ndarray,
    times: np.ndarray,
    mode: Interpolation | str = Interpolation.LINEAR,
) -> np.ndarray:
    return survival_matrix(model, x, 1, times, mode) - survival_matrix(model, x, 0, times, mode)


def predict_survival_at(
    model: SurvCausNet,
    x: np.ndarray,
    t: int,
    y: Union[float, np.ndarray],
    mode: Interpolation | str = Interpolation.LINEAR,
) -> Union[float, np.ndarray]:
    values = survival_matrix(model, np.asarray(x).reshape(1, -1), t, y, mode)[0]
    return float(values[0]) if np.ndim(y) == 0 else values


def predict_cate(
    model: SurvCausNet,
    x: np.ndarray,
    y: Union[float, np.ndarray],
    mode: Interpolation | str = Interpolation.LINEAR,
) -> Union[float, np.ndarray]:
    values = cate_matrix(model, np.asarray(x).reshape(1, -1), y, mode)[0]
    return float(values[0]) if np.ndim(y) == 0 else values
