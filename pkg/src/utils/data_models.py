"""
Data Models — Core Containers for Censored Observational Data.

Design principles:
  1. A Dataset is immutable once validated: arrays are flagged read-only,
     so it can be handed to parallel workers without copies.
  2. Every row keeps its original index (`row_ids`), so ground truth
     simulated for row i can be looked up after splitting.
  3. The discrete model output and the continuous survival curve share one
     interpolation routine (`interpolate_survival`) used by the network,
     the metrics and the tests.

Conventions:
  TimeGrid cuts 0 = τ_0 < τ_1 < … < τ_m define intervals
  I_j = (τ_{j-1}, τ_j] for j = 1..m and the beyond-horizon bin m+1 = (τ_m, ∞).
  A survival vector `values` has m+1 entries: values[j] = F̄(τ_j), values[0] = 1.

CSV layout (Dataset):
  header `x0,...,x{d-1},t,y,delta` plus an optional `split` column;
  numbers use the shortest round-trip decimal representation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from src.utils.config import Interpolation
from src.utils.errors import DataValidationError

TREATMENT_COL = "t"
TIME_COL = "y"
EVENT_COL = "delta"
SPLIT_COL = "split"
RESERVED_COLS = (TREATMENT_COL, TIME_COL, EVENT_COL, SPLIT_COL)

SPLIT_NAMES = ("train", "val", "test")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Dataset:
    """
    Observational survival data: covariates X, treatment T, observed time
    Y^c = min(Y, C) and event indicator δ = 1{Y ≤ C} for n individuals.
    """
    features: np.ndarray
    treatment: np.ndarray
    time: np.ndarray
    event: np.ndarray
    split: Optional[np.ndarray] = None
    row_ids: Optional[np.ndarray] = None
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        n = features.shape[0]
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "treatment", _frozen(np.asarray(self.treatment, dtype=np.int64)))
        object.__setattr__(self, "time", _frozen(np.asarray(self.time, dtype=np.float64)))
        object.__setattr__(self, "event", _frozen(np.asarray(self.event, dtype=np.int64)))
        row_ids = np.arange(n) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        object.__setattr__(self, "row_ids", _frozen(row_ids))
        if self.split is not None:
            object.__setattr__(self, "split", _frozen(np.asarray(self.split, dtype=object)))
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{j}" for j in range(features.shape[1])))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def treated_fraction(self) -> float:
        return float(self.treatment.mean())

    @property
    def censoring_fraction(self) -> float:
        return float(1.0 - self.event.mean())

    def subset(self, index: Union[np.ndarray, Sequence[int]], split_tag: Optional[str] = None) -> "Dataset":
        index = np.asarray(index)
        split = None
        if split_tag is not None:
            split = np.full(len(index) if index.dtype != bool else int(index.sum()), split_tag, dtype=object)
        elif self.split is not None:
            split = self.split[index]
        return Dataset(
            features=self.features[index],
            treatment=self.treatment[index],
            time=self.time[index],
            event=self.event[index],
            split=split,
            row_ids=self.row_ids[index],
            feature_names=self.feature_names,
        )

    def to_frame(self, include_split: bool = True) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=[f"x{j}" for j in range(self.d)])
        frame[TREATMENT_COL] = self.treatment
        frame[TIME_COL] = self.time
        frame[EVENT_COL] = self.event
        if include_split and self.split is not None:
            frame[SPLIT_COL] = self.split
        return frame

    def __repr__(self) -> str:
        return (f"Dataset(n={self.n}, d={self.d}, treated={self.treated_fraction:.2f}, "
                f"censored={self.censoring_fraction:.2f})")


@dataclass(frozen=True)
class TimeGrid:
    """Ordered cut points 0 = τ_0 < … < τ_m (m ≥ 2 intervals plus a beyond-horizon bin)."""
    cuts: np.ndarray

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=np.float64).ravel()
        if cuts.size < 3:
            raise DataValidationError(f"a TimeGrid needs m >= 2 intervals, got {cuts.size - 1}")
        if cuts[0] != 0.0:
            raise DataValidationError(f"TimeGrid must start at 0, got {cuts[0]}")
        if not np.all(np.isfinite(cuts)) or np.any(np.diff(cuts) <= 0):
            raise DataValidationError("TimeGrid cuts must be finite and strictly increasing")
        object.__setattr__(self, "cuts", _frozen(cuts))

    @property
    def m(self) -> int:
        return int(self.cuts.size - 1)

    @property
    def horizon(self) -> float:
        return float(self.cuts[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.cuts)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"tau": self.cuts})

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.cuts, other.cuts)

    def __hash__(self) -> int:
        return hash(self.cuts.tobytes())

    def __repr__(self) -> str:
        return f"TimeGrid(m={self.m}, horizon={self.horizon:.4g})"


@dataclass(frozen=True)
class DiscreteSurvivalOutput:
    """
    Probability vector over the m+1 bins for one individual and arm.

    probs[j-1] is the mass of bin j (1-based), so survival(k) — the mass
    strictly after bin k — is probs[k:].sum().
    """
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(np.asarray(self.probs, dtype=np.float64).ravel()))

    @property
    def m(self) -> int:
        return int(self.probs.size - 1)

    def survival(self, k: int) -> float:
        if k < 0 or k > self.m + 1:
            raise IndexError(f"bin index {k} outside 0..{self.m + 1}")
        if k == 0:
            return 1.0
        if k == self.m + 1:
            return 0.0
        return float(self.probs[k:].sum())

    def survival_values(self) -> np.ndarray:
        """F̄ at the cut points τ_0..τ_m (length m+1, first entry 1)."""
        tail = np.cumsum(self.probs[::-1])[::-1]
        values = np.empty(self.m + 1)
        values[0] = 1.0
        values[1:] = tail[1:]
        return values


def check_discrete_output(output: DiscreteSurvivalOutput, atol: float = 1e-6) -> None:
    """Raise AssertionError unless `output` is normalized and its survival is monotone."""
    probs = output.probs
    assert np.all(np.isfinite(probs)), "non-finite probabilities"
    assert np.all(probs >= 0.0), "negative probability"
    assert abs(probs.sum() - 1.0) <= atol, f"probabilities sum to {probs.sum()}"
    values = [output.survival(k) for k in range(output.m + 2)]
    assert values[0] == 1.0 and values[-1] == 0.0
    assert all(b <= a + atol for a, b in zip(values, values[1:])), "survival is increasing"


def interpolate_survival(
    cuts: np.ndarray,
    values: np.ndarray,
    times: Union[float, np.ndarray],
    mode: Interpolation | str = Interpolation.LINEAR,
) -> np.ndarray:
    """
    Evaluate discrete survival knots at continuous times.

    `values` is (m+1,) or (n, m+1) with values[..., j] = F̄(τ_j). Step mode
    returns F̄(τ_{k(y)}); linear mode interpolates between τ_{j-1} and τ_j.
    Both return 1 at y = 0 and extrapolate F̄(τ_m) beyond the horizon.
    """
    mode = Interpolation(mode)
    cuts = np.asarray(cuts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    m = cuts.size - 1

    k = np.clip(np.searchsorted(cuts, times, side="left"), 1, m)
    beyond = times > cuts[-1]

    if mode is Interpolation.STEP:
        out = values[..., k]
        out = np.where(times <= 0.0, 1.0, out)
    else:
        lo, hi = cuts[k - 1], cuts[k]
        frac = np.clip((times - lo) / (hi - lo), 0.0, 1.0)
        out = values[..., k - 1] + (values[..., k] - values[..., k - 1]) * frac
    return np.where(beyond, values[..., m:m + 1] if values.ndim > 1 else values[m], out)


@dataclass(frozen=True)
class SurvivalCurve:
    """Survival probabilities at the grid cut points plus an interpolation rule."""
    grid: TimeGrid
    values: np.ndarray
    mode: Interpolation = Interpolation.LINEAR

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != self.grid.m + 1:
            raise DataValidationError(f"expected {self.grid.m + 1} survival values, got {values.size}")
        if values[0] != 1.0 or np.any(values < 0) or np.any(values > 1) or np.any(np.diff(values) > 1e-12):
            raise DataValidationError("survival values must start at 1, stay in [0,1] and not increase")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mode", Interpolation(self.mode))

    def __call__(self, times: Union[float, np.ndarray]) -> np.ndarray:
        return interpolate_survival(self.grid.cuts, self.values, times, self.mode)


# ── Validation ────────────────────────────────────────────────────────────────

def _as_frame(raw: Union[pd.DataFrame, Iterable[Mapping]]) -> pd.DataFrame:
    if isinstance(raw, pd.DataFrame):
        return raw.reset_index(drop=True)
    return pd.DataFrame(list(raw))


def _binary_column(frame: pd.DataFrame, col: str, label: str) -> np.ndarray:
    values = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isin(values, (0.0, 1.0)))
    if bad.size:
        raise DataValidationError(f"non-binary {label} value {frame[col].iloc[bad[0]]!r}", row=int(bad[0]))
    return values.astype(np.int64)


def validate_dataset(raw: Union[pd.DataFrame, Iterable[Mapping]]) -> Dataset:
    """
    Turn a table of rows into a validated Dataset, preserving row order.

    Feature columns are every column except t, y, delta and split.
    Raises DataValidationError on negative or non-finite times, non-binary
    treatment/event, non-finite features, or an empty treatment arm.
    """
    frame = _as_frame(raw)
    missing = [c for c in (TREATMENT_COL, TIME_COL, EVENT_COL) if c not in frame.columns]
    if missing:
        raise DataValidationError(f"missing required columns: {missing}")
    if len(frame) == 0:
        raise DataValidationError("dataset has no rows")

    feature_cols = [c for c in frame.columns if c not in RESERVED_COLS]
    if not feature_cols:
        raise DataValidationError("dataset has no feature columns")

    features = frame[feature_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(features), axis=1))
    if bad_rows.size:
        raise DataValidationError("non-finite feature", row=int(bad_rows[0]))

    time = pd.to_numeric(frame[TIME_COL], errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(time))
    if bad.size:
        raise DataValidationError("non-finite time", row=int(bad[0]))
    bad = np.flatnonzero(time < 0)
    if bad.size:
        raise DataValidationError("negative time", row=int(bad[0]))

    treatment = _binary_column(frame, TREATMENT_COL, "treatment")
    event = _binary_column(frame, EVENT_COL, "event")

    if not np.any(treatment == 0):
        raise DataValidationError("empty control group")
    if not np.any(treatment == 1):
        raise DataValidationError("empty treated group")

    split = None
    if SPLIT_COL in frame.columns:
        split = frame[SPLIT_COL].astype(str).to_numpy(dtype=object)
        unknown = set(split) - set(SPLIT_NAMES)
        if unknown:
            raise DataValidationError(f"unknown split tags {sorted(unknown)}")

    return Dataset(
        features=features,
        treatment=treatment,
        time=time,
        event=event,
        split=split,
        feature_names=tuple(str(c) for c in feature_cols),
    )


# ── Splitting ─────────────────────────────────────────────────────────────────

def _split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    n_test = int(np.floor(n * fractions[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split(
    dataset: Dataset,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    max_retries: int = 20,
) -> tuple[Dataset, Dataset, Dataset]:
    """
    Disjoint train/val/test split, stratified by treatment.

    Deterministic given `seed`. Every split must contain both arms; if a
    draw violates that, the permutation is redrawn (seed + attempt) up to
    `max_retries` times before giving up.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataValidationError(f"split fractions must be 3 positive numbers summing to 1, got {fractions}")

    sizes = _split_sizes(dataset.n, fractions)
    if min(sizes) < 2:
        raise DataValidationError(f"n={dataset.n} too small for split sizes {sizes}")

    index = np.arange(dataset.n)
    last_error = ""
    for attempt in range(max_retries):
        state = seed + attempt
        try:
            rest, test = train_test_split(
                index, test_size=sizes[2], stratify=dataset.treatment, random_state=state
            )
            train, val = train_test_split(
                rest, test_size=sizes[1], stratify=dataset.treatment[rest], random_state=state
            )
        except ValueError as e:
            last_error = str(e)
            continue
        parts = [np.sort(train), np.sort(val), np.sort(test)]
        if all(np.unique(dataset.treatment[p]).size == 2 for p in parts):
            return tuple(dataset.subset(p, split_tag=tag) for p, tag in zip(parts, SPLIT_NAMES))
        last_error = "a split is missing one treatment arm"

    raise DataValidationError(
        f"could not split n={dataset.n} into {sizes} with both arms after {max_retries} tries ({last_error})"
    )


def tag_splits(train: Dataset, val: Dataset, test: Dataset) -> Dataset:
    """Reassemble three splits into one dataset in original row order, with split tags."""
    row_ids = np.concatenate([train.row_ids, val.row_ids, test.row_ids])
    order = np.argsort(row_ids, kind="stable")
    tags = np.concatenate([
        np.full(train.n, "train", dtype=object),
        np.full(val.n, "val", dtype=object),
        np.full(test.n, "test", dtype=object),
    ])
    return Dataset(
        features=np.vstack([train.features, val.features, test.features])[order],
        treatment=np.concatenate([train.treatment, val.treatment, test.treatment])[order],
        time=np.concatenate([train.time, val.time, test.time])[order],
        event=np.concatenate([train.event, val.event, test.event])[order],
        split=tags[order],
        row_ids=row_ids[order],
        feature_names=train.feature_names,
    )


def splits_from_tags(dataset: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    if dataset.split is None:
        raise DataValidationError("dataset carries no split tags")
    return tuple(dataset.subset(np.flatnonzero(dataset.split == tag)) for tag in SPLIT_NAMES)


# ── Normalization ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature z-score using statistics of the training split."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureScaler":
        features = np.asarray(features, dtype=np.float64)
        std = features.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean=features.mean(axis=0), std=std)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std


# ── CSV I/O ───────────────────────────────────────────────────────────────────

def write_dataset_csv(dataset: Dataset, path: Union[str, Path], include_split: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame(include_split=include_split).to_csv(path, index=False, lineterminator="\n")
    return path


def read_dataset_csv(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    return validate_dataset(frame)
