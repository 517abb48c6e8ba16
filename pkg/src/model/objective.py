"""
Objective — Weighted Survival Likelihood, Balancing Penalty and Ridge Terms.

For a batch of n_b rows:

    Õ = (1/n_b) Σ w̃_i L_i
        + (γ_wd / n_b) · S_ε(p̂_1^{φ,w}, p̂_0^{φ,w})
        + (λ_r / √n_b) · ‖Ψ‖₂
        + (λ_w / n_b) · ‖w‖₂

  L_i   discretized censored negative log-likelihood
          δ=1: −log σ_{k(y)}          δ=0: −log Σ_{j>k(y)} σ_j
  w     importance weights, mean 1 inside each arm
  w̃     α_t + (1 − α_t)·w
  S_ε   Sinkhorn divergence between the embedded arms, atoms weighted by w

Weight modes:
  uniform     w ≡ 1
  propensity  w = α_t / p(t|x) with p(1|x) from a logistic regression on the
              training split, scores clipped to [0.01, 0.99]
  learned     w = softplus(θ_i), θ trained jointly, renormalized per arm

A censored row whose time lies beyond τ_m has an empty tail; it contributes 0
and is counted (or uses σ_{m+1} when censored_tail = include).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from torch import nn

from src.model.network import SurvCausNet, log_probs_from_logits
from src.model.sinkhorn import WeightedCloud, default_epsilon, cost_matrix, sinkhorn_divergence
from src.utils.config import CensoredTail, HyperParams, WeightMode
from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

PROPENSITY_CLIP = (0.01, 0.99)
PROB_FLOOR = 1e-12


# ── Importance weights ────────────────────────────────────────────────────────

def arm_fractions(treatment: np.ndarray) -> np.ndarray:
    """(α_0, α_1) = empirical P(T = t)."""
    alpha1 = float(np.mean(np.asarray(treatment) == 1))
    return np.array([1.0 - alpha1, alpha1])


def fit_propensity(features: np.ndarray, treatment: np.ndarray, seed: int = 0) -> LogisticRegression:
    model = LogisticRegression(max_iter=1000, random_state=seed)
    model.fit(np.asarray(features, dtype=np.float64), np.asarray(treatment))
    return model


def propensity_scores(model: LogisticRegression, features: np.ndarray) -> np.ndarray:
    scores = model.predict_proba(np.asarray(features, dtype=np.float64))[:, 1]
    return np.clip(scores, *PROPENSITY_CLIP)


def raw_propensity_weights(e: np.ndarray, treatment: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """w_i = α_{t_i} / p(t_i | x_i) before per-arm renormalization."""
    e = np.clip(np.asarray(e, dtype=np.float64), *PROPENSITY_CLIP)
    if not np.all(np.isfinite(e)):
        raise DataValidationError("propensity scores must be finite")
    t = np.asarray(treatment)
    p_t = np.where(t == 1, e, 1.0 - e)
    return alpha[t] / p_t


def normalize_per_arm(w: np.ndarray, treatment: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).copy()
    t = np.asarray(treatment)
    for arm in (0, 1):
        mask = t == arm
        if mask.any():
            w[mask] /= w[mask].mean()
    return w


def tilde_weights(w: np.ndarray, treatment: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """w̃ = α_t + (1 − α_t)·w."""
    a = alpha[np.asarray(treatment)]
    return a + (1.0 - a) * w


def propensity_weights(
    e: np.ndarray,
    treatment: np.ndarray,
    alpha: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(w, w̃) from propensity scores, w renormalized to mean 1 per arm."""
    alpha = arm_fractions(treatment) if alpha is None else np.asarray(alpha, dtype=np.float64)
    w = normalize_per_arm(raw_propensity_weights(e, treatment, alpha), treatment)
    return w, tilde_weights(w, treatment, alpha)


class LearnedWeights(nn.Module):
    """w_i = softplus(θ_i), renormalized to mean 1 inside each arm of the training set."""

    def __init__(self, treatment: np.ndarray):
        super().__init__()
        n = len(treatment)
        self.register_buffer("treatment", torch.as_tensor(np.asarray(treatment, dtype=np.int64)))
        # softplus(log(e − 1)) = 1
        self.theta = nn.Parameter(torch.full((n,), float(np.log(np.e - 1.0)), dtype=torch.float64))

    def forward(self) -> torch.Tensor:
        raw = nn.functional.softplus(self.theta)
        out = torch.ones_like(raw)
        for arm in (0, 1):
            mask = self.treatment == arm
            if bool(mask.any()):
                out = torch.where(mask, raw / raw[mask].mean(), out)
        return out


# ── Loss terms ────────────────────────────────────────────────────────────────

def survival_nll(
    logits: torch.Tensor,
    k: torch.Tensor,
    event: torch.Tensor,
    censored_tail: CensoredTail | str = CensoredTail.ZERO,
) -> tuple[torch.Tensor, int]:
    """
    Per-row negative log-likelihood straight from head logits.

    k holds interval indices in 0..m+1. Returns (losses, empty_tail_count).
    """
    log_p = log_probs_from_logits(logits)
    n, bins = log_p.shape
    k = k.to(torch.int64).reshape(-1)
    event = event.to(torch.bool).reshape(-1)

    event_idx = torch.clamp(k - 1, min=0, max=bins - 1)
    event_loss = -log_p.gather(1, event_idx[:, None]).squeeze(1)

    cols = torch.arange(bins)[None, :]
    tail_mask = cols >= k[:, None]
    empty = (~event) & (k >= bins)
    if CensoredTail(censored_tail) is CensoredTail.INCLUDE:
        tail_mask = tail_mask | (empty[:, None] & (cols == bins - 1))
    masked = log_p.masked_fill(~tail_mask, float("-inf"))
    has_tail = tail_mask.any(dim=1)
    safe = torch.where(has_tail[:, None], masked, torch.zeros_like(masked))
    censor_loss = torch.where(has_tail, -torch.logsumexp(safe, dim=1), torch.zeros(n, dtype=log_p.dtype))

    losses = torch.where(event, event_loss, censor_loss)
    empty_count = int(((~event) & ~has_tail).sum())
    return losses, empty_count


def survival_nll_from_probs(probs: np.ndarray, k: np.ndarray, event: np.ndarray) -> np.ndarray:
    """Probability-space NLL with a 1e−12 floor (reference path for checks)."""
    probs = np.asarray(probs, dtype=np.float64)
    out = np.zeros(probs.shape[0])
    for i, (row, ki, di) in enumerate(zip(probs, np.asarray(k), np.asarray(event))):
        if di == 1:
            out[i] = -np.log(max(row[ki - 1], PROB_FLOOR))
        elif ki < row.size:
            out[i] = -np.log(max(row[ki:].sum(), PROB_FLOOR))
    return out


def ridge_penalties(model: SurvCausNet, weights: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(Ω, Θ) = (‖Ψ‖₂ over all head parameters, ‖w‖₂ or 0)."""
    flat = torch.cat([p.reshape(-1) for p in model.head_parameters()])
    omega = torch.linalg.vector_norm(flat)
    theta = torch.linalg.vector_norm(weights) if weights is not None else torch.zeros((), dtype=flat.dtype)
    return omega, theta


def balance_term(
    z: torch.Tensor,
    t: torch.Tensor,
    w: torch.Tensor,
    hyper: HyperParams,
) -> Optional[torch.Tensor]:
    """Sinkhorn divergence between the w-weighted embedded arms; None if an arm is absent."""
    treated = t == 1
    control = ~treated
    if not bool(treated.any()) or not bool(control.any()):
        return None
    a = WeightedCloud.weighted(z[treated], w[treated])
    b = WeightedCloud.weighted(z[control], w[control])
    eps = hyper.sinkhorn_eps
    if eps is None:
        eps = default_epsilon(cost_matrix(a, b), hyper.sinkhorn_eps_scale)
    return sinkhorn_divergence(a, b, eps=eps, max_iter=hyper.sinkhorn_max_iter, tol=hyper.sinkhorn_tol)


# ── Composite objective ───────────────────────────────────────────────────────

@dataclass
class ObjectiveBatch:
    x: torch.Tensor
    t: torch.Tensor
    k: torch.Tensor
    event: torch.Tensor
    w: torch.Tensor
    w_tilde: torch.Tensor

    @property
    def size(self) -> int:
        return int(self.x.shape[0])


@dataclass
class ObjectiveTerms:
    total: torch.Tensor
    nll: torch.Tensor
    balance: torch.Tensor
    omega: torch.Tensor
    theta: torch.Tensor
    skipped_balance: bool = False
    empty_tail: int = 0


def make_batch(
    x: np.ndarray,
    t: np.ndarray,
    k: np.ndarray,
    event: np.ndarray,
    w: Optional[np.ndarray | torch.Tensor] = None,
    w_tilde: Optional[np.ndarray | torch.Tensor] = None,
) -> ObjectiveBatch:
    n = len(t)
    w = torch.ones(n, dtype=torch.float64) if w is None else torch.as_tensor(w, dtype=torch.float64)
    w_tilde = torch.ones(n, dtype=torch.float64) if w_tilde is None else torch.as_tensor(w_tilde, dtype=torch.float64)
    return ObjectiveBatch(
        x=torch.as_tensor(np.asarray(x, dtype=np.float64)),
        t=torch.as_tensor(np.asarray(t, dtype=np.int64)),
        k=torch.as_tensor(np.asarray(k, dtype=np.int64)),
        event=torch.as_tensor(np.asarray(event, dtype=np.int64)),
        w=w,
        w_tilde=w_tilde,
    )


def total_objective(
    model: SurvCausNet,
    batch: ObjectiveBatch,
    hyper: HyperParams,
    weight_mode: WeightMode | str | None = None,
) -> ObjectiveTerms:
    """Õ on one batch; differentiable in the model (and in learned weights when they carry grad)."""
    weight_mode = WeightMode(weight_mode or hyper.weight_mode)
    n_b = batch.size
    z = model.embed(batch.x)
    logits = model.head(z, batch.t)
    losses, empty = survival_nll(logits, batch.k, batch.event, hyper.censored_tail)
    nll = (batch.w_tilde * losses).sum() / n_b

    zero = torch.zeros((), dtype=torch.float64)
    balance, skipped = zero, False
    if hyper.gamma_wd > 0:
        value = balance_term(z, batch.t, batch.w, hyper)
        if value is None:
            skipped = True
        else:
            balance = value

    omega, theta = ridge_penalties(model, None if weight_mode is WeightMode.UNIFORM else batch.w)
    total = (nll
             + hyper.gamma_wd / n_b * balance
             + hyper.lambda_r / np.sqrt(n_b) * omega
             + hyper.lambda_w / n_b * theta)
    return ObjectiveTerms(
        total=total, nll=nll, balance=balance, omega=omega, theta=theta,
        skipped_balance=skipped, empty_tail=empty,
    )


def gradient(
    model: SurvCausNet,
    batch: ObjectiveBatch,
    hyper: HyperParams,
    extra: Optional[list[torch.Tensor]] = None,
) -> list[torch.Tensor]:
    """Reverse-mode gradient of Õ w.r.t. every model parameter (then `extra`, e.g. learned θ)."""
    params = list(model.parameters()) + list(extra or [])
    terms = total_objective(model, batch, hyper)
    grads = torch.autograd.grad(terms.total, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
