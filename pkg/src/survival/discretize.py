"""
Discretization — Kaplan-Meier Estimation and Time Grids.

Two grid builders:
  grid_equidistant   cuts j·max_time/m
  grid_km_quantile   survival levels spaced evenly between 1 and Ŝ(t_max);
                     each cut is the first event time where Ŝ drops to the level,
                     so cuts are denser where events are frequent

Both use a horizon at a high quantile of the observed training times, so a
single extreme time does not stretch the last interval.

interval_index maps a time to its right-closed interval I_k = (τ_{k-1}, τ_k];
y = 0 maps to 1 and y > τ_m maps to the beyond-horizon bin m+1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from src.utils.config import GridType
from src.utils.data_models import Dataset, TimeGrid
from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

_LEVEL_TOL = 1e-12


@dataclass(frozen=True)
class KMEstimate:
    event_times: np.ndarray
    survival_values: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray

    @property
    def has_events(self) -> bool:
        return self.event_times.size > 0

    def survival_at(self, times: Union[float, np.ndarray]) -> np.ndarray:
        """Right-continuous step function: Ŝ at the last event time ≤ t, 1 before the first."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        idx = np.searchsorted(self.event_times, times, side="right")
        values = np.concatenate([[1.0], self.survival_values])
        return values[idx]

    def truncate(self, horizon: float) -> "KMEstimate":
        keep = self.event_times <= horizon
        return KMEstimate(
            event_times=self.event_times[keep],
            survival_values=self.survival_values[keep],
            n_at_risk=self.n_at_risk[keep],
            n_events=self.n_events[keep],
        )


def kaplan_meier(time: np.ndarray, event: np.ndarray) -> KMEstimate:
    """
    Product-limit estimate Ŝ(t) = Π_{t_j ≤ t} (1 − d_j / n_j).

    Rows censored at an event time are still at risk at that time
    (events precede censorings).
    """
    time = np.asarray(time, dtype=np.float64).ravel()
    event = np.asarray(event, dtype=np.int64).ravel()
    if time.size == 0:
        raise DataValidationError("kaplan_meier needs at least one observation")
    if time.size != event.size:
        raise DataValidationError(f"{time.size} times but {event.size} event flags")
    if np.any(time < 0):
        raise DataValidationError("negative time", row=int(np.flatnonzero(time < 0)[0]))

    unique, inverse = np.unique(time, return_inverse=True)
    deaths = np.bincount(inverse, weights=event, minlength=unique.size).astype(np.int64)
    counts = np.bincount(inverse, minlength=unique.size)
    at_risk = time.size - np.concatenate([[0], np.cumsum(counts)[:-1]])

    has_event = deaths > 0
    factors = 1.0 - deaths[has_event] / at_risk[has_event]
    return KMEstimate(
        event_times=unique[has_event],
        survival_values=np.cumprod(factors),
        n_at_risk=at_risk[has_event],
        n_events=deaths[has_event],
    )


def grid_equidistant(max_time: float, m: int) -> TimeGrid:
    if m < 2:
        raise DataValidationError(f"a grid needs m >= 2 intervals, got {m}")
    if not max_time > 0:
        raise DataValidationError(f"max_time must be > 0, got {max_time}")
    return TimeGrid(np.arange(m + 1) * (max_time / m))


def grid_km_quantile(km: KMEstimate, m: int) -> TimeGrid:
    """
    Cuts at the generalized inverse of Ŝ on levels η_i = 1 − i(1 − η_m)/m,
    where η_m = Ŝ at the last event time. Duplicate cuts are collapsed.
    """
    if m < 2:
        raise DataValidationError(f"a grid needs m >= 2 intervals, got {m}")
    if not km.has_events:
        raise DataValidationError("KM estimate has no events; cannot build a quantile grid")

    eta_m = float(km.survival_values[-1])
    levels = 1.0 - np.arange(1, m + 1) * (1.0 - eta_m) / m
    # first index where Ŝ ≤ η_i (Ŝ is non-increasing)
    idx = np.searchsorted(-km.survival_values, -(levels + _LEVEL_TOL), side="left")
    idx = np.minimum(idx, km.event_times.size - 1)
    cuts = np.unique(np.concatenate([[0.0], km.event_times[idx]]))
    if cuts.size < 3:
        raise DataValidationError(f"only {cuts.size - 1} distinct KM cut(s) obtainable; need at least 2")
    if cuts.size - 1 < m:
        logger.info(f"KM grid collapsed duplicate cuts: m={m} → {cuts.size - 1}")
    return TimeGrid(cuts)


def observed_horizon(time: np.ndarray, quantile: float = 0.95) -> float:
    return float(np.quantile(np.asarray(time, dtype=np.float64), quantile))


def build_grid(
    dataset: Dataset,
    n_durations: int,
    grid_type: GridType | str = GridType.KM,
    horizon_quantile: float = 0.95,
) -> TimeGrid:
    """Grid from a training split: horizon at a quantile of y, then equidistant or KM cuts."""
    horizon = observed_horizon(dataset.time, horizon_quantile)
    if GridType(grid_type) is GridType.EQUIDISTANT:
        grid = grid_equidistant(horizon, n_durations)
    else:
        km = kaplan_meier(dataset.time, dataset.event).truncate(horizon)
        grid = grid_km_quantile(km, n_durations)
    logger.debug(f"Built {GridType(grid_type).value} grid: {grid}")
    return grid


def interval_index(grid: TimeGrid, y: Union[float, np.ndarray]) -> Union[int, np.ndarray]:
    """k(y) ∈ 1..m+1 with cuts[k−1] < y ≤ cuts[k]; y = 0 gives 1, y > τ_m gives m+1."""
    scalar = np.ndim(y) == 0
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if np.any(y < 0):
        raise DataValidationError("interval_index needs y >= 0")
    k = np.maximum(np.searchsorted(grid.cuts, y, side="left"), 1)
    return int(k[0]) if scalar else k
