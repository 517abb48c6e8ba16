"""
Sinkhorn — Entropic Optimal Transport Between Weighted Point Clouds.

Used twice:
  - as the balancing penalty on embedded treated/control mini-batches
  - as d_WD^init, the distance between the two arms in covariate space

Algorithm:
  Log-domain Sinkhorn on the dual potentials (f, g) with the coupling
      P_ij = a_i b_j exp((f_i + g_j − C_ij) / ε)
  Each sweep makes the column marginal exact; the L1 violation of the row
  marginal is the stopping criterion.

Gradients:
  Potentials are computed without autograd. The returned value is rebuilt
  from the detached potentials plus a zero-valued surrogate ⟨P, C − C.detach()⟩,
  so autograd sees dOT/dC = P and dOT/da = f, dOT/db = g (envelope theorem).
  No iterations are unrolled.

Divergence:
  S_ε(a, b) = OT_ε(a, b) − ½ OT_ε(a, a) − ½ OT_ε(b, b), floored at 0.
  For squared-Euclidean cost it equals ‖c‖² exactly when b is a translated
  copy of a by c.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from src.utils.errors import DataValidationError, SinkhornConvergenceWarning

logger = logging.getLogger(__name__)

DEFAULT_EPS_SCALE = 0.05
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-6
_CHECK_EVERY = 5

ArrayLike = Union[np.ndarray, torch.Tensor]


def _tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class WeightedCloud:
    """k atoms in R^z with positive masses summing to 1."""
    points: torch.Tensor
    masses: torch.Tensor

    def __post_init__(self):
        points = _tensor(self.points)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        masses = _tensor(self.masses).reshape(-1)
        if points.shape[0] != masses.shape[0]:
            raise DataValidationError(f"{points.shape[0]} points but {masses.shape[0]} masses")
        if points.shape[0] == 0:
            raise DataValidationError("empty cloud")
        m = masses.detach()
        if torch.any(m <= 0) or abs(float(m.sum()) - 1.0) > 1e-9:
            raise DataValidationError("cloud masses must be positive and sum to 1")
        if not torch.all(torch.isfinite(points.detach())):
            raise DataValidationError("cloud points must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "masses", masses)

    @classmethod
    def uniform(cls, points: ArrayLike) -> "WeightedCloud":
        points = _tensor(points)
        k = points.shape[0]
        return cls(points, torch.full((k,), 1.0 / k, dtype=torch.float64))

    @classmethod
    def weighted(cls, points: ArrayLike, weights: ArrayLike) -> "WeightedCloud":
        """Atoms weighted by positive (unnormalized) weights."""
        weights = _tensor(weights).reshape(-1)
        return cls(points, weights / weights.sum())

    @property
    def size(self) -> int:
        return int(self.points.shape[0])


@dataclass
class SinkhornResult:
    value: torch.Tensor          # dual value OT_ε, differentiable through the envelope surrogate
    plan: torch.Tensor           # detached coupling P
    cost: torch.Tensor           # C used (carries autograd graph)
    n_iter: int
    marginal_error: float
    converged: bool

    @property
    def transport_cost(self) -> torch.Tensor:
        """⟨P, C⟩ excluding the entropy term."""
        return (self.plan * self.cost).sum()


def cost_matrix(a: WeightedCloud, b: WeightedCloud) -> torch.Tensor:
    """C[i, j] = ‖a_i − b_j‖²."""
    if a.points.shape[1] != b.points.shape[1]:
        raise DataValidationError(
            f"dimension mismatch: {a.points.shape[1]} vs {b.points.shape[1]}"
        )
    diff = a.points[:, None, :] - b.points[None, :, :]
    return (diff * diff).sum(dim=-1)


def default_epsilon(cost: torch.Tensor, scale: float = DEFAULT_EPS_SCALE) -> float:
    """scale × median of the positive cost entries (1.0 as reference when all are 0)."""
    c = cost.detach().reshape(-1)
    positive = c[c > 0]
    median = float(positive.median()) if positive.numel() else 1.0
    return scale * median


def sinkhorn(
    a: WeightedCloud,
    b: WeightedCloud,
    eps: Optional[float] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    cost: Optional[torch.Tensor] = None,
) -> SinkhornResult:
    """Run log-domain Sinkhorn and return the differentiable dual value plus diagnostics."""
    C = cost_matrix(a, b) if cost is None else cost
    if eps is None:
        eps = default_epsilon(C)
    if eps <= 0:
        raise DataValidationError(f"sinkhorn eps must be > 0, got {eps}")

    C_det = C.detach()
    a_det, b_det = a.masses.detach(), b.masses.detach()
    log_a, log_b = torch.log(a_det), torch.log(b_det)

    with torch.no_grad():
        f = torch.zeros_like(a_det)
        g = torch.zeros_like(b_det)
        err = float("inf")
        n_iter = 0
        for n_iter in range(1, max_iter + 1):
            f = -eps * torch.logsumexp(log_b[None, :] + (g[None, :] - C_det) / eps, dim=1)
            g = -eps * torch.logsumexp(log_a[:, None] + (f[:, None] - C_det) / eps, dim=0)
            if n_iter % _CHECK_EVERY == 0 or n_iter == max_iter:
                log_p = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C_det) / eps
                err = float((torch.exp(log_p).sum(dim=1) - a_det).abs().sum())
                if err < tol:
                    break
        plan = torch.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C_det) / eps)

    converged = err < tol
    if not converged and err > 10 * tol:
        warnings.warn(
            f"Sinkhorn stopped after {n_iter} iterations with marginal error {err:.3e}",
            SinkhornConvergenceWarning,
            stacklevel=2,
        )

    value = (a.masses * f).sum() + (b.masses * g).sum() + (plan * (C - C_det)).sum()
    return SinkhornResult(
        value=value, plan=plan, cost=C, n_iter=n_iter, marginal_error=err, converged=converged
    )


def sinkhorn_cost(
    a: WeightedCloud,
    b: WeightedCloud,
    eps: Optional[float] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> torch.Tensor:
    """Transport cost ⟨P*, C⟩ of the entropic plan."""
    return sinkhorn(a, b, eps, max_iter, tol).transport_cost


def sinkhorn_divergence(
    a: WeightedCloud,
    b: WeightedCloud,
    eps: Optional[float] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    eps_scale: float = DEFAULT_EPS_SCALE,
) -> torch.Tensor:
    """Debiased entropic OT divergence; ε defaults to eps_scale × median of the cross cost."""
    C_ab = cost_matrix(a, b)
    if eps is None:
        eps = default_epsilon(C_ab, eps_scale)
    ot_ab = sinkhorn(a, b, eps, max_iter, tol, cost=C_ab).value
    ot_aa = sinkhorn(a, a, eps, max_iter, tol).value
    ot_bb = sinkhorn(b, b, eps, max_iter, tol).value
    return torch.clamp(ot_ab - 0.5 * ot_aa - 0.5 * ot_bb, min=0.0)


def divergence_between(x0: ArrayLike, x1: ArrayLike, eps: Optional[float] = None,
                       max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> float:
    """Plain-float divergence between two uniformly weighted clouds."""
    with torch.no_grad():
        value = sinkhorn_divergence(WeightedCloud.uniform(x0), WeightedCloud.uniform(x1), eps, max_iter, tol)
    return float(value)
