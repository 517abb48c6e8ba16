"""
Theory Checks — Likelihood Loss, KL, Total Variation and the PEHE Bound.

Everything is evaluated on a fine grid of N equal cells over [0, τ_min]
(edges a_c = (c−1)h, b_c = c·h). For one arm t and a row x:

  event mass     q_c = F̄(a_c) − F̄(b_c)           (truth q*_c, candidate q_c)
  censor mass    r*_c = H̄*(a_c) − H̄*(b_c)

The observed-data law (time in cell c, event or censoring, or still at risk
at τ_min) puts mass
    q_c·H̄*(a_c)       on (c, event)
    r*_c·F̄(b_c)       on (c, censored)
    F̄(τ_min)·H̄*(τ_min) on the administrative atom
which telescopes to exactly 1 for both truth and candidate. With it

  ℓ_f(x)  = −Σ q*_c H̄*(a_c) log(q_c/h) − Σ r*_c F̄*(b_c) log F̄(b_c)
            − F̄*(τ)H̄*(τ) log F̄(τ)
  KL_x    = ℓ_f(x) − ℓ_{f*}(x)    (the discrete KL of the two laws, ≥ 0)
  TV_x    = ½ Σ |q_c − q*_c|

and the checks below hold exactly, up to rounding:

  censored Pinsker    TV_x ≤ √(KL_x / 2) / H̄*(τ_min)
  classical Pinsker   same with H̄* ≡ 1
  CATE vs TV          ⅛ (ΔCATE)² ≤ TV_0² + TV_1²
  PEHE bound          E_x[(ΔCATE)²] ≤ (4/η²)(E_x[KL_0] + E_x[KL_1]),  η = e^{−λ_c τ_min}

Candidates are the truth's Weibull with the rate scaled by e^u, so their
cumulative hazard is Λ*(y)·e^{αu}.
"""
from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.survival.simulate import SimTruth, make_synthetic
from src.utils.config import SimConfig, TheoryConfig
from src.utils.errors import BoundViolationError, DataValidationError
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["pair_id", "x_id", "lhs", "rhs", "slack", "holds"]
DENSITY_FLOOR = 1e-12
_LOG_FLOOR = 1e-300


def _log(values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(values, _LOG_FLOOR))


@dataclass(frozen=True)
class DensityPair:
    """Truth and candidate for one arm on the fine grid, one row per individual."""
    edges: np.ndarray
    true_surv: np.ndarray        # (n, N+1) F̄* at the edges
    cand_surv: np.ndarray        # (n, N+1) F̄ at the edges
    censor_surv: np.ndarray      # (N+1,)   H̄* at the edges

    @classmethod
    def weibull(
        cls,
        truth: SimTruth,
        t: int,
        rows: np.ndarray,
        u: Union[float, np.ndarray],
        cells: int = 2000,
        censored: bool = True,
    ) -> "DensityPair":
        edges = np.linspace(0.0, truth.tau_min, cells + 1)
        hazard = truth.cumulative_hazard(t, edges, rows)
        scale = np.exp(truth.alpha * np.broadcast_to(np.asarray(u, dtype=np.float64), (len(rows),)))
        censor = truth.censoring_survival(edges) if censored else np.ones(edges.size)
        return cls(edges=edges, true_surv=np.exp(-hazard),
                   cand_surv=np.exp(-hazard * scale[:, None]), censor_surv=censor)

    def uncensored(self) -> "DensityPair":
        return DensityPair(self.edges, self.true_surv, self.cand_surv, np.ones_like(self.censor_surv))

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def eta(self) -> float:
        return float(self.censor_surv[-1])

    @property
    def true_mass(self) -> np.ndarray:
        return -np.diff(self.true_surv, axis=1)

    @property
    def cand_mass(self) -> np.ndarray:
        return -np.diff(self.cand_surv, axis=1)

    @property
    def censor_mass(self) -> np.ndarray:
        return -np.diff(self.censor_surv)

    def observed_law(self, candidate: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(event masses, censoring masses, administrative atom) of the observed-data law."""
        surv = self.cand_surv if candidate else self.true_surv
        mass = -np.diff(surv, axis=1)
        event = mass * self.censor_surv[None, :-1]
        censor = self.censor_mass[None, :] * surv[:, 1:]
        atom = surv[:, -1] * self.censor_surv[-1]
        return event, censor, atom


def pointwise_loss(pair: DensityPair, candidate: bool = True) -> np.ndarray:
    """ℓ_f(x) per row, for the candidate (default) or for the truth itself."""
    h = pair.width
    surv = pair.cand_surv if candidate else pair.true_surv
    density = np.maximum(-np.diff(surv, axis=1) / h, DENSITY_FLOOR)
    event_part = (pair.true_mass * pair.censor_surv[None, :-1] * np.log(density)).sum(axis=1)
    censor_part = (pair.censor_mass[None, :] * pair.true_surv[:, 1:] * _log(surv[:, 1:])).sum(axis=1)
    atom_part = pair.true_surv[:, -1] * pair.censor_surv[-1] * _log(surv[:, -1])
    return -(event_part + censor_part + atom_part)


def kl_x(pair: DensityPair) -> np.ndarray:
    return pointwise_loss(pair, candidate=True) - pointwise_loss(pair, candidate=False)


def joint_kl(pair: DensityPair) -> np.ndarray:
    """KL between the observed-data laws, computed directly as Σ P* log(P*/P)."""
    h = pair.width
    star = pair.observed_law(candidate=False)
    cand_event, cand_censor, cand_atom = pair.observed_law(candidate=True)
    cand_event = np.maximum(cand_event / h, DENSITY_FLOOR * pair.censor_surv[None, :-1]) * h
    total = np.zeros(pair.true_surv.shape[0])
    for p, q in ((star[0], cand_event), (star[1], cand_censor), (star[2][:, None], cand_atom[:, None])):
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(p > 0, p * (_log(p) - _log(q)), 0.0)
        total += term.sum(axis=1)
    return total


def total_variation(mass_a: np.ndarray, mass_b: np.ndarray) -> np.ndarray:
    """½ Σ |a − b| over the cells (last axis)."""
    return 0.5 * np.abs(np.asarray(mass_a) - np.asarray(mass_b)).sum(axis=-1)


def tv_x(pair: DensityPair) -> np.ndarray:
    return total_variation(pair.cand_mass, pair.true_mass)


def _report(pair_ids, x_ids, lhs, rhs, tolerance: float) -> pd.DataFrame:
    lhs, rhs = np.asarray(lhs, dtype=np.float64), np.asarray(rhs, dtype=np.float64)
    return pd.DataFrame({
        "pair_id": np.asarray(pair_ids, dtype=np.int64),
        "x_id": np.asarray(x_ids, dtype=np.int64),
        "lhs": lhs,
        "rhs": rhs,
        "slack": rhs - lhs,
        "holds": lhs <= rhs + tolerance,
    })


def check_pinsker(pair: DensityPair, x_ids: np.ndarray, pair_ids: np.ndarray,
                  tolerance: float = 1e-6) -> pd.DataFrame:
    """TV_x ≤ √(KL_x/2) / H̄*(τ_min), one report row per individual."""
    eta = pair.eta
    if not eta > 0:
        raise DataValidationError(f"censoring survival at tau_min is {eta}; the window is too long")
    rhs = np.sqrt(np.maximum(kl_x(pair), 0.0) / 2.0) / eta
    return _report(pair_ids, x_ids, tv_x(pair), rhs, tolerance)


def cate_gap(pair0: DensityPair, pair1: DensityPair) -> np.ndarray:
    """ĈATE − CATE* at τ_min."""
    cand = pair1.cand_surv[:, -1] - pair0.cand_surv[:, -1]
    true = pair1.true_surv[:, -1] - pair0.true_surv[:, -1]
    return cand - true


def check_cate_tv(pair0: DensityPair, pair1: DensityPair, x_ids: np.ndarray, pair_ids: np.ndarray,
                  tolerance: float = 1e-6) -> pd.DataFrame:
    lhs = cate_gap(pair0, pair1) ** 2 / 8.0
    rhs = tv_x(pair0) ** 2 + tv_x(pair1) ** 2
    return _report(pair_ids, x_ids, lhs, rhs, tolerance)


@dataclass
class Theorem1Result:
    rows: pd.DataFrame
    pehe: float
    excess_risk0: float
    excess_risk1: float
    eta: float

    @property
    def rhs(self) -> float:
        return 4.0 / self.eta ** 2 * (self.excess_risk0 + self.excess_risk1)

    def holds(self, tolerance: float = 1e-6) -> bool:
        return self.pehe <= self.rhs + tolerance


def check_theorem1(pair0: DensityPair, pair1: DensityPair, x_ids: np.ndarray, pair_id: int,
                   tolerance: float = 1e-6) -> Theorem1Result:
    """PEHE ≤ (4/η²)(ER(f_0) + ER(f_1)) by Monte-Carlo over the rows, plus the per-row form."""
    eta = pair0.eta
    if not eta > 0:
        raise DataValidationError(f"eta={eta} is not bounded away from 0")
    gap2 = cate_gap(pair0, pair1) ** 2
    kl0, kl1 = kl_x(pair0), kl_x(pair1)
    rows = _report(np.full(len(x_ids), pair_id), x_ids, gap2, 4.0 / eta ** 2 * (kl0 + kl1), tolerance)
    return Theorem1Result(rows=rows, pehe=float(gap2.mean()), excess_risk0=float(kl0.mean()),
                          excess_risk1=float(kl1.mean()), eta=eta)


# ── Suite ─────────────────────────────────────────────────────────────────────

@dataclass
class TheoryReport:
    pinsker: pd.DataFrame
    pinsker_uncensored: pd.DataFrame
    cate_tv: pd.DataFrame
    theorem1: pd.DataFrame
    theorem1_summary: pd.DataFrame

    def frames(self) -> dict[str, pd.DataFrame]:
        return {
            "pinsker": self.pinsker,
            "pinsker_uncensored": self.pinsker_uncensored,
            "cate_tv": self.cate_tv,
            "theorem1": self.theorem1,
            "theorem1_summary": self.theorem1_summary,
        }

    def violations(self) -> dict[str, int]:
        return {name: int((~frame["holds"]).sum()) for name, frame in self.frames().items()}

    def assert_holds(self) -> None:
        bad = {name: count for name, count in self.violations().items() if count}
        if bad:
            raise BoundViolationError(f"bound violations: {bad}")


def theory_truth(sim: SimConfig, n_x: int) -> SimTruth:
    """Truth from a simulated dataset large enough to sample `n_x` individuals."""
    _, truth = make_synthetic(replace(sim, n=max(sim.n, n_x)))
    return truth


def run_theory_suite(sim: SimConfig, config: TheoryConfig, truth: Optional[SimTruth] = None) -> TheoryReport:
    truth = truth or theory_truth(sim, config.n_x)
    rng = make_rng(config.seed)
    delta, tol, cells = config.perturbation, config.tolerance, config.cells

    # Pinsker and CATE-vs-TV: one x and one proposal per arm for each pair
    n_p = config.n_pinsker_pairs
    x_ids = rng.integers(truth.n, size=n_p)
    u = rng.uniform(-delta, delta, size=(n_p, 2))
    ids = np.arange(n_p)
    pairs = [DensityPair.weibull(truth, t, x_ids, u[:, t], cells) for t in (0, 1)]
    arm = ids % 2
    pinsker = pd.concat([check_pinsker(pairs[t], x_ids, ids, tol)[arm == t] for t in (0, 1)])
    pinsker_unc = pd.concat([check_pinsker(pairs[t].uncensored(), x_ids, ids, tol)[arm == t] for t in (0, 1)])
    cate_tv = check_cate_tv(pairs[0], pairs[1], x_ids, ids, tol)

    # PEHE bound: every proposal pair against the same sampled x
    sample = rng.choice(truth.n, size=config.n_x, replace=truth.n < config.n_x)
    rows, summary = [], []
    for pair_id in tqdm(range(config.n_pairs), desc="theorem1", disable=not sys.stderr.isatty()):
        u0, u1 = rng.uniform(-delta, delta, size=2)
        result = check_theorem1(
            DensityPair.weibull(truth, 0, sample, u0, cells),
            DensityPair.weibull(truth, 1, sample, u1, cells),
            sample, pair_id, tol,
        )
        rows.append(result.rows)
        summary.append({"pair_id": pair_id, "pehe": result.pehe, "rhs": result.rhs,
                        "slack": result.rhs - result.pehe, "holds": result.holds(tol)})

    report = TheoryReport(
        pinsker=pinsker.sort_values("pair_id", kind="stable").reset_index(drop=True),
        pinsker_uncensored=pinsker_unc.sort_values("pair_id", kind="stable").reset_index(drop=True),
        cate_tv=cate_tv,
        theorem1=pd.concat(rows, ignore_index=True),
        theorem1_summary=pd.DataFrame(summary),
    )
    logger.info(f"Theory suite: eta={float(np.exp(-truth.lambda_c * truth.tau_min)):.4f}, "
                f"violations={report.violations()}")
    return report
