"""
Trainer — Mini-Batch Adam, Early Stopping and Random Search.

Training loop (one run, sequential):
  for epoch in 0..max_epochs-1:
    shuffle train rows with a seeded numpy Generator
    for each batch:
      Õ_batch → backward → finite check → clip global norm → Adam step
    validation objective on the full validation split (balancing term included)
    keep the best parameters; stop after `patience` epochs without an
    improvement larger than `min_improvement`

Divergence:
  A non-finite objective or gradient raises TrainingDivergedError carrying
  the best finite state so far and the partial TrainReport.

Random search:
  `budget` configurations drawn uniformly with replacement from the discrete
  candidate lists, each fitted independently, ranked by best validation score.
"""
from __future__ import annotations

import copy
import logging
import sys
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from src.model.network import SurvCausNet, init_params
from src.model.objective import (
    LearnedWeights, ObjectiveBatch, ObjectiveTerms, arm_fractions, fit_propensity,
    normalize_per_arm, propensity_scores, propensity_weights, raw_propensity_weights,
    tilde_weights, total_objective,
)
from src.survival.discretize import build_grid, interval_index
from src.utils.config import EarlyStopMetric, HyperParams, SearchSpace, WeightMode
from src.utils.data_models import Dataset, FeatureScaler, TimeGrid
from src.utils.errors import TrainingDivergedError
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)


class StopReason(str, Enum):
    PATIENCE = "patience"
    MAX_EPOCHS = "max_epochs"
    DIVERGENCE = "divergence"


@dataclass
class EpochRecord:
    epoch: int
    train_obj: float
    val_obj: float
    balance_term: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stop_reason: Optional[StopReason] = None
    skipped_balance: int = 0
    empty_tail: int = 0

    def add(self, record: EpochRecord) -> None:
        self.epochs.append(record)

    @property
    def n_epochs(self) -> int:
        return len(self.epochs)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.epoch, r.train_obj, r.val_obj, r.balance_term, r.seconds) for r in self.epochs],
            columns=["epoch", "train_obj", "val_obj", "balance_term", "seconds"],
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


@dataclass
class _Split:
    x: torch.Tensor
    t: torch.Tensor
    k: torch.Tensor
    event: torch.Tensor
    alpha: np.ndarray

    @classmethod
    def of(cls, dataset: Dataset, grid: TimeGrid, alpha: np.ndarray) -> "_Split":
        return cls(
            x=torch.as_tensor(dataset.features, dtype=torch.float64),
            t=torch.as_tensor(dataset.treatment, dtype=torch.int64),
            k=torch.as_tensor(interval_index(grid, dataset.time), dtype=torch.int64),
            event=torch.as_tensor(dataset.event, dtype=torch.int64),
            alpha=alpha,
        )

    @property
    def n(self) -> int:
        return int(self.x.shape[0])


class WeightPlan:
    """Train/validation importance weights for one of the three weight modes."""

    def __init__(self, mode: WeightMode, train: Dataset, val: Dataset, scaler: FeatureScaler, seed: int):
        self.mode = WeightMode(mode)
        self.alpha = arm_fractions(train.treatment)
        self.learned: Optional[LearnedWeights] = None
        self._train_t = torch.as_tensor(train.treatment, dtype=torch.int64)
        ones_train, ones_val = np.ones(train.n), np.ones(val.n)

        if self.mode is WeightMode.PROPENSITY:
            clf = fit_propensity(scaler.transform(train.features), train.treatment, seed)
            w, wt = propensity_weights(propensity_scores(clf, scaler.transform(train.features)),
                                       train.treatment, self.alpha)
            w_val = normalize_per_arm(
                raw_propensity_weights(propensity_scores(clf, scaler.transform(val.features)),
                                       val.treatment, self.alpha),
                val.treatment,
            )
            wt_val = tilde_weights(w_val, val.treatment, self.alpha)
        else:
            w, wt, w_val, wt_val = ones_train, ones_train, ones_val, ones_val
            if self.mode is WeightMode.LEARNED:
                self.learned = LearnedWeights(train.treatment)

        self.train_w = torch.as_tensor(w)
        self.train_w_tilde = torch.as_tensor(wt)
        self.val_w = torch.as_tensor(w_val)
        self.val_w_tilde = torch.as_tensor(wt_val)

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.learned.parameters()) if self.learned is not None else []

    def train_batch(self, idx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.learned is None:
            return self.train_w[idx], self.train_w_tilde[idx]
        w = self.learned()[idx]
        a = torch.as_tensor(self.alpha)[self._train_t[idx]]
        return w, a + (1.0 - a) * w


def _batch(split: _Split, idx: torch.Tensor, w: torch.Tensor, w_tilde: torch.Tensor) -> ObjectiveBatch:
    return ObjectiveBatch(x=split.x[idx], t=split.t[idx], k=split.k[idx], event=split.event[idx],
                          w=w, w_tilde=w_tilde)


def _finite(value: torch.Tensor) -> bool:
    return bool(torch.isfinite(value).all())


def evaluate_objective(model: SurvCausNet, batch: ObjectiveBatch, hyper: HyperParams,
                       weight_mode: Optional[WeightMode] = None) -> ObjectiveTerms:
    with torch.no_grad():
        return total_objective(model, batch, hyper, weight_mode)


def fit(
    train: Dataset,
    val: Dataset,
    hyper: HyperParams,
    grid: Optional[TimeGrid] = None,
) -> tuple[SurvCausNet, TrainReport]:
    """Train SurvCaus and return the best-validation model with its report."""
    grid = grid or build_grid(train, hyper.n_durations, hyper.grid_type, hyper.horizon_quantile)
    scaler = FeatureScaler.fit(train.features)
    model = init_params(train.d, grid, hyper, scaler=scaler)
    weights = WeightPlan(hyper.weight_mode, train, val, scaler, hyper.seed)
    # validation in learned mode runs with uniform weights
    val_mode = WeightMode.UNIFORM if weights.mode is WeightMode.LEARNED else weights.mode

    params = list(model.parameters()) + weights.parameters()
    optimizer = torch.optim.Adam(params, lr=hyper.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = make_rng(hyper.seed)

    tr = _Split.of(train, grid, weights.alpha)
    va = _Split.of(val, grid, weights.alpha)
    all_val = torch.arange(va.n)
    val_batch = _batch(va, all_val, weights.val_w, weights.val_w_tilde)

    report = TrainReport()
    best_state = copy.deepcopy(model.state_dict())
    wait = 0

    def diverged(message: str, epoch: int) -> TrainingDivergedError:
        report.stop_reason = StopReason.DIVERGENCE
        logger.error(f"Training diverged at epoch {epoch}: {message}")
        return TrainingDivergedError(message, state=best_state, report=report)

    logger.info(
        f"Fitting SurvCaus: n_train={train.n}, n_val={val.n}, m={grid.m}, "
        f"gamma_wd={hyper.gamma_wd}, weights={weights.mode.value}, lr={hyper.lr}"
    )
    for epoch in range(hyper.max_epochs):
        started = time.perf_counter()
        perm = torch.as_tensor(rng.permutation(tr.n))
        obj_sum, balance_sum = 0.0, 0.0

        model.train()
        for start in range(0, tr.n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            w, w_tilde = weights.train_batch(idx)
            batch = _batch(tr, idx, w, w_tilde)

            optimizer.zero_grad()
            terms = total_objective(model, batch, hyper)
            if not _finite(terms.total):
                raise diverged("non-finite training objective", epoch)
            terms.total.backward()
            if not all(_finite(p.grad) for p in params if p.grad is not None):
                raise diverged("non-finite gradient", epoch)
            torch.nn.utils.clip_grad_norm_(params, hyper.clip_norm)
            optimizer.step()

            obj_sum += float(terms.total) * batch.size
            balance_sum += float(terms.balance) * batch.size
            report.skipped_balance += int(terms.skipped_balance)
            report.empty_tail += terms.empty_tail

        model.eval()
        val_terms = evaluate_objective(model, val_batch, hyper, val_mode)
        if not _finite(val_terms.total):
            raise diverged("non-finite validation objective", epoch)
        score = float(val_terms.nll if hyper.early_stop_metric is EarlyStopMetric.NLL else val_terms.total)

        seconds = time.perf_counter() - started if hyper.record_seconds else 0.0
        report.add(EpochRecord(epoch, obj_sum / tr.n, float(val_terms.total), balance_sum / tr.n, seconds))
        logger.info(f"epoch {epoch}: train={obj_sum / tr.n:.5f} val={float(val_terms.total):.5f}")

        if score < report.best_val - hyper.min_improvement:
            report.best_val, report.best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
            wait = 0
        else:
            wait += 1
        if wait >= hyper.patience:
            report.stop_reason = StopReason.PATIENCE
            break
    else:
        report.stop_reason = StopReason.MAX_EPOCHS

    if report.skipped_balance:
        logger.warning(f"Balancing term skipped on {report.skipped_balance} single-arm batch(es)")
    if report.empty_tail:
        logger.warning(f"{report.empty_tail} censored row-visit(s) beyond the horizon contributed 0")

    model.load_state_dict(best_state)
    model.eval()
    logger.info(f"Best epoch {report.best_epoch} (val={report.best_val:.5f}, stop={report.stop_reason.value})")
    return model, report


# ── Random search ─────────────────────────────────────────────────────────────

@dataclass
class LeaderboardEntry:
    config_id: int
    hyper: HyperParams
    val_objective: float
    status: str
    rank: int = 0


@dataclass
class SearchResult:
    best: HyperParams
    leaderboard: list[LeaderboardEntry]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for entry in self.leaderboard:
            row = {"rank": entry.rank, "config_id": entry.config_id,
                   "val_objective": entry.val_objective, "status": entry.status}
            row.update(entry.hyper.as_dict())
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


def sample_configurations(space: SearchSpace, base: HyperParams, budget: int, seed: int) -> list[HyperParams]:
    rng = make_rng(seed)
    configs = []
    for _ in range(budget):
        choice = {name: values[int(rng.integers(len(values)))]
                  for name, values in sorted(space.candidates.items())}
        configs.append(base.replace(**choice))
    return configs


def random_search(
    train: Dataset,
    val: Dataset,
    space: SearchSpace,
    base: HyperParams,
    budget: Optional[int] = None,
    seed: Optional[int] = None,
) -> SearchResult:
    budget = space.budget if budget is None else budget
    seed = space.seed if seed is None else seed
    configs = sample_configurations(space, base, budget, seed)

    entries = []
    for config_id, hyper in enumerate(tqdm(configs, desc="search", disable=not sys.stderr.isatty())):
        try:
            _, report = fit(train, val, hyper)
            entries.append(LeaderboardEntry(config_id, hyper, report.best_val, "ok"))
        except TrainingDivergedError as e:
            logger.warning(f"Search candidate {config_id} diverged: {e}")
            entries.append(LeaderboardEntry(config_id, hyper, float("inf"), "diverged"))

    if all(e.status != "ok" for e in entries):
        raise TrainingDivergedError(f"all {budget} search candidates diverged")

    entries.sort(key=lambda e: (e.val_objective, e.config_id))
    for rank, entry in enumerate(entries, start=1):
        entry.rank = rank
    return SearchResult(best=entries[0].hyper, leaderboard=entries)
