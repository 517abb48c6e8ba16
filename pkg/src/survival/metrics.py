"""
Metrics — Scores Against Simulated Ground Truth.

On the evaluation window [0, τ_min] with trapezoid weights:

  MiseSurv(x, t) = ‖F̄*_t(x,·) − F̂_t(x,·)‖
  MiseCate(x)    = ‖CATE*(x,·) − ĈATE(x,·)‖
  FSMise(x)²     = MiseSurv(x, 0)² + MiseSurv(x, 1)²
  MCATE, FSM     = means of MiseCate and FSMise over the test rows
  MPEHE          = mean of (CATE* − ĈATE)² over rows × grid times (0 excluded)

MiseCate² ≤ 2·FSMise² holds for every row because the quadrature weights
are positive; EvaluationResult exposes the per-row check.

Predictors are anything with `survival(t, features, rows, times)`; the
fitted network and the oracle truth share that interface.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import pandas as pd

from src.model.network import SurvCausNet, survival_matrix
from src.survival.simulate import SimTruth
from src.utils.data_models import Dataset, Interpolation, TimeGrid
from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["run_id", "seed", "gamma_wd", "p_wd", "d_wd_init", "MCATE", "MPEHE", "FSM"]


@dataclass(frozen=True)
class EvalGrid:
    times: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_times(cls, times: np.ndarray) -> "EvalGrid":
        times = np.unique(np.asarray(times, dtype=np.float64))
        if times.size < 2 or times[0] < 0:
            raise DataValidationError("an evaluation grid needs at least two nonnegative times")
        gaps = np.diff(times)
        weights = np.zeros(times.size)
        weights[:-1] += gaps / 2.0
        weights[1:] += gaps / 2.0
        return cls(times=times, weights=weights)

    @classmethod
    def from_grid(cls, grid: TimeGrid, tau_min: float) -> "EvalGrid":
        """{0} ∪ {τ_j ≤ τ_min} ∪ {τ_min}."""
        if not tau_min > 0:
            raise DataValidationError(f"tau_min must be > 0, got {tau_min}")
        inside = grid.cuts[(grid.cuts > 0) & (grid.cuts <= tau_min)]
        if inside.size == 0:
            raise DataValidationError(
                f"grid mismatch: no cut of {grid} lies inside the truth window [0, {tau_min:.4g}]"
            )
        if tau_min > grid.horizon:
            logger.warning(f"tau_min={tau_min:.4g} exceeds the model horizon {grid.horizon:.4g}; "
                           f"predictions are extrapolated")
        return cls.from_times(np.concatenate([[0.0], inside, [tau_min]]))

    @classmethod
    def uniform(cls, tau_min: float, n_points: int) -> "EvalGrid":
        return cls.from_times(np.linspace(0.0, tau_min, n_points))

    @property
    def tau_min(self) -> float:
        return float(self.times[-1])

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) @ self.weights


def _l2(diff: np.ndarray, grid: EvalGrid) -> np.ndarray:
    return np.sqrt(np.maximum(grid.integrate(np.square(diff)), 0.0))


def mise_surv(pred: np.ndarray, true: np.ndarray, grid: EvalGrid) -> np.ndarray:
    """Per-row L² distance between survival curves evaluated on `grid.times`."""
    return _l2(np.asarray(pred) - np.asarray(true), grid)


def mise_cate(pred_cate: np.ndarray, true_cate: np.ndarray, grid: EvalGrid) -> np.ndarray:
    return _l2(np.asarray(pred_cate) - np.asarray(true_cate), grid)


def mpehe(pred_cate: np.ndarray, true_cate: np.ndarray) -> float:
    pred_cate, true_cate = np.asarray(pred_cate), np.asarray(true_cate)
    if pred_cate.shape != true_cate.shape:
        raise DataValidationError(f"shape mismatch: {pred_cate.shape} vs {true_cate.shape}")
    return float(np.mean(np.square(pred_cate - true_cate)))


@dataclass(frozen=True)
class AggregateScores:
    MCATE: float
    FSM: float


def aggregate(mise_cate_values: np.ndarray, fsmise_values: np.ndarray) -> AggregateScores:
    mise_cate_values = np.asarray(mise_cate_values)
    if mise_cate_values.size == 0:
        raise DataValidationError("cannot aggregate an empty test set")
    return AggregateScores(MCATE=float(np.mean(mise_cate_values)), FSM=float(np.mean(fsmise_values)))


# ── Predictors ────────────────────────────────────────────────────────────────

class Predictor(Protocol):
    def survival(self, t: int, features: np.ndarray, rows: np.ndarray, times: np.ndarray) -> np.ndarray:
        ...


class ModelPredictor:
    def __init__(self, model: SurvCausNet, mode: Interpolation | str = Interpolation.LINEAR):
        self.model = model
        self.mode = Interpolation(mode)

    def survival(self, t, features, rows, times):
        return survival_matrix(self.model, features, t, times, self.mode)


class OraclePredictor:
    """The simulated truth behind the predictor interface."""

    def __init__(self, truth: SimTruth):
        self.truth = truth

    def survival(self, t, features, rows, times):
        return self.truth.survival(t, times, rows)


@dataclass
class EvaluationResult:
    row_ids: np.ndarray
    times: np.ndarray
    surv0: np.ndarray
    surv1: np.ndarray
    mise_surv0: np.ndarray
    mise_surv1: np.ndarray
    mise_cate: np.ndarray
    fsmise: np.ndarray
    MCATE: float
    FSM: float
    MPEHE: float

    @property
    def MCATE_sq(self) -> float:
        return float(np.mean(np.square(self.mise_cate)))

    @property
    def FSM_sq(self) -> float:
        return float(np.mean(np.square(self.fsmise)))

    def dominance_holds(self, tol: float = 1e-12) -> np.ndarray:
        """Per row: MiseCate² ≤ 2·FSMise²."""
        return np.square(self.mise_cate) <= 2.0 * np.square(self.fsmise) + tol

    def metrics_row(self, run_id: str, seed: int, gamma_wd: float, p_wd: float, d_wd_init: float) -> dict:
        return {
            "run_id": run_id, "seed": seed, "gamma_wd": gamma_wd, "p_wd": p_wd,
            "d_wd_init": d_wd_init, "MCATE": self.MCATE, "MPEHE": self.MPEHE, "FSM": self.FSM,
            "MCATE_sq": self.MCATE_sq, "FSM_sq": self.FSM_sq,
        }

    def predictions_frame(self) -> pd.DataFrame:
        """Long table `i,tau,surv0,surv1,cate`."""
        n, n_times = self.surv0.shape
        return pd.DataFrame({
            "i": np.repeat(self.row_ids, n_times),
            "tau": np.tile(self.times, n),
            "surv0": self.surv0.ravel(),
            "surv1": self.surv1.ravel(),
            "cate": (self.surv1 - self.surv0).ravel(),
        })


def evaluate_predictor(
    predictor: Predictor,
    truth: SimTruth,
    dataset: Dataset,
    grid: EvalGrid,
) -> EvaluationResult:
    """Score a predictor on the rows of `dataset` (truth is indexed by `dataset.row_ids`)."""
    if dataset.n == 0:
        raise DataValidationError("cannot evaluate on an empty test set")
    rows = dataset.row_ids
    if rows.max() >= truth.n:
        raise DataValidationError(f"row id {rows.max()} outside the {truth.n} simulated rows")

    times = grid.times
    pred0 = predictor.survival(0, dataset.features, rows, times)
    pred1 = predictor.survival(1, dataset.features, rows, times)
    true0 = truth.survival(0, times, rows)
    true1 = truth.survival(1, times, rows)

    m0, m1 = mise_surv(pred0, true0, grid), mise_surv(pred1, true1, grid)
    mc = mise_cate(pred1 - pred0, true1 - true0, grid)
    fs = np.sqrt(m0 ** 2 + m1 ** 2)
    scores = aggregate(mc, fs)
    positive = times > 0
    result = EvaluationResult(
        row_ids=rows, times=times, surv0=pred0, surv1=pred1,
        mise_surv0=m0, mise_surv1=m1, mise_cate=mc, fsmise=fs,
        MCATE=scores.MCATE, FSM=scores.FSM,
        MPEHE=mpehe((pred1 - pred0)[:, positive], (true1 - true0)[:, positive]),
    )
    logger.info(f"Evaluation on {dataset.n} rows: MCATE={result.MCATE:.4f} FSM={result.FSM:.4f} "
                f"MPEHE={result.MPEHE:.4f}")
    return result
