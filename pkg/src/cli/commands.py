"""
Experiment Commands — simulate, train, evaluate, sweep, theory, search.

Every command takes a loaded RunConfig, writes its artifacts under
`config.out_dir` and returns a process exit code:

  0  success
  1  validation error (bad config, bad data, missing file)
  2  runtime failure (training divergence, every sweep replicate failed)
  3  bound violation in the theory suite

train, evaluate and search read dataset.csv, truth_params.json and
checkpoint.pt from the output directory unless paths.* names other files,
so simulate → train → evaluate chain on one `--out`.

Commands raise; `run_command` is the single place that maps exceptions
to exit codes, so tests can call either layer.

Artifacts (all CSVs carry a header and use '\\n' line endings):
  simulate  dataset.csv, truth_params.json, grid.csv, truth.csv
  train     checkpoint.pt, train_report.csv
            (on divergence: checkpoint_last.pt with the last finite state)
  evaluate  metrics.csv, predictions.csv
  sweep     sweep_results.csv, sweep_aggregate.csv, sweep_paired.csv
  theory    theory_<check>.csv for each bound
  search    leaderboard.csv, best_config.cfg
"""
from __future__ import annotations

import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from src.model.checkpoint import load_checkpoint, save_checkpoint
from src.model.network import SurvCausNet
from src.model.trainer import fit, random_search
from src.pipeline.definitions import REPLICATE, replicate_pipeline
from src.pipeline.pipeline_engine import PipelineEngine
from src.survival.discretize import build_grid
from src.survival.metrics import EvalGrid, ModelPredictor, evaluate_predictor
from src.survival.simulate import SimTruth, initial_wasserstein, make_semisynthetic, make_synthetic
from src.survival.theory import run_theory_suite
from src.utils.config import HyperParams, RunConfig, format_hyper
from src.utils.data_models import (
    Dataset, FeatureScaler, TimeGrid, read_dataset_csv, split, splits_from_tags, tag_splits,
    write_dataset_csv,
)
from src.utils.errors import ConfigError, TrainingDivergedError, exit_code_for
from src.utils.seeding import replicate_seed

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ("MCATE", "MPEHE", "FSM")
OUTPUT_ARTIFACTS = {"dataset": "dataset.csv", "truth": "truth_params.json", "checkpoint": "checkpoint.pt"}


# ── Shared helpers ────────────────────────────────────────────────────────────

def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def _artifact_path(config: RunConfig, name: str) -> Optional[Path]:
    """paths.<name> when set, else the file an earlier command wrote to the output directory."""
    value = getattr(config.paths, name)
    if value is not None:
        return config.resolve(value)
    if name in OUTPUT_ARTIFACTS:
        return Path(config.out_dir) / OUTPUT_ARTIFACTS[name]
    return None


def _required_path(config: RunConfig, name: str) -> Path:
    path = _artifact_path(config, name)
    if path is None:
        raise ConfigError("is required for this command", key=f"paths.{name}")
    if not path.exists():
        raise FileNotFoundError(f"paths.{name}: file not found: {path}")
    return path


def _simulate(config: RunConfig) -> tuple[Dataset, SimTruth]:
    if config.paths.covariates is not None:
        return make_semisynthetic(_required_path(config, "covariates"), config.sim)
    return make_synthetic(config.sim)


def _load_splits(config: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Splits of the configured (or previously simulated) dataset, else of a fresh simulation."""
    default = _artifact_path(config, "dataset")
    if config.paths.dataset is None and not default.exists():
        dataset, _ = _simulate(config)
    else:
        dataset = read_dataset_csv(_required_path(config, "dataset"))
    if dataset.split is not None:
        return splits_from_tags(dataset)
    return split(dataset, config.split_fractions, seed=config.sim.seed)


def _restore(state: dict, hyper: HyperParams) -> SurvCausNet:
    """Network from a bare state_dict (cuts and scaling statistics live in its buffers)."""
    scaler = FeatureScaler(mean=state["feature_mean"].numpy(), std=state["feature_std"].numpy())
    model = SurvCausNet(scaler.mean.shape[0], TimeGrid(state["cuts"].numpy()), hyper, scaler)
    model.load_state_dict(state)
    return model


# ── simulate ──────────────────────────────────────────────────────────────────

def cmd_simulate(config: RunConfig) -> int:
    out = _out_dir(config)
    dataset, truth = _simulate(config)
    train, val, test = split(dataset, config.split_fractions, seed=config.sim.seed)
    write_dataset_csv(tag_splits(train, val, test), out / "dataset.csv")
    truth.to_json(out / "truth_params.json")

    grid = build_grid(train, config.hyper.n_durations, config.hyper.grid_type, config.hyper.horizon_quantile)
    _write_csv(grid.to_frame(), out / "grid.csv")
    taus = EvalGrid.from_grid(grid, truth.tau_min).times
    _write_csv(truth.export_frame(taus), out / "truth.csv")

    d_wd_init = initial_wasserstein(dataset)
    print(f"censoring={dataset.censoring_fraction:.4f} treated={dataset.treated_fraction:.4f} "
          f"d_wd_init={d_wd_init:.6f}")
    return 0


# ── train ─────────────────────────────────────────────────────────────────────

def cmd_train(config: RunConfig) -> int:
    out = _out_dir(config)
    train, val, _ = _load_splits(config)
    try:
        model, report = fit(train, val, config.hyper)
    except TrainingDivergedError as e:
        if e.state is not None:
            save_checkpoint(_restore(e.state, config.hyper), out / "checkpoint_last.pt")
        if e.report is not None:
            e.report.to_csv(out / "train_report.csv")
        raise
    save_checkpoint(model, out / "checkpoint.pt")
    report.to_csv(out / "train_report.csv")
    print(f"best_epoch={report.best_epoch} best_val={report.best_val:.6f} stop={report.stop_reason.value}")
    return 0


# ── evaluate ──────────────────────────────────────────────────────────────────

def cmd_evaluate(config: RunConfig) -> int:
    out = _out_dir(config)
    model = load_checkpoint(_required_path(config, "checkpoint"))
    truth = SimTruth.from_json(_required_path(config, "truth"))
    dataset = read_dataset_csv(_required_path(config, "dataset"))
    test = splits_from_tags(dataset)[2] if dataset.split is not None else dataset

    grid = EvalGrid.from_grid(model.grid, truth.tau_min)
    result = evaluate_predictor(ModelPredictor(model, model.hyper.interpolation), truth, test, grid)
    row = result.metrics_row(
        run_id="evaluate", seed=model.hyper.seed, gamma_wd=model.hyper.gamma_wd,
        p_wd=config.sim.p_wd, d_wd_init=initial_wasserstein(dataset),
    )
    _write_csv(pd.DataFrame([row]), out / "metrics.csv")
    _write_csv(result.predictions_frame(), out / "predictions.csv")
    print(f"MCATE={result.MCATE:.6f} MPEHE={result.MPEHE:.6f} FSM={result.FSM:.6f}")
    return 0


# ── sweep ─────────────────────────────────────────────────────────────────────

@dataclasses.dataclass(frozen=True)
class ReplicateJob:
    """One grid point × replicate; picklable for the worker pool."""
    p_idx: int
    g_idx: int
    replicate: int
    p_wd: float
    gamma_wd: float
    seed: int
    config: RunConfig

    @property
    def run_id(self) -> str:
        return f"p{self.p_idx}-g{self.g_idx}-r{self.replicate}"


def sweep_jobs(config: RunConfig) -> list[ReplicateJob]:
    """
    Seeds depend on (master, p_wd index, replicate) only, so every γ_wd
    value of a replicate sees identical data.
    """
    master = config.sweep.seed
    p_values = config.sweep.p_wd or (config.sim.p_wd,)
    return [
        ReplicateJob(p_idx, g_idx, r, float(p_wd), float(gamma), replicate_seed(master, p_idx, r), config)
        for p_idx, p_wd in enumerate(p_values)
        for g_idx, gamma in enumerate(config.sweep.gamma_wd)
        for r in range(config.sweep.replicates)
    ]


def run_replicate(job: ReplicateJob) -> dict:
    """simulate → train → evaluate (→ ablation) for one job; never raises."""
    config = job.config
    engine = PipelineEngine()
    engine.register(replicate_pipeline(with_ablation=config.sweep.ablation,
                                       train_retries=config.hyper.max_retries))
    covariates = config.resolve(config.paths.covariates) if config.paths.covariates else None
    result = engine.run(REPLICATE, {
        "sim_config": dataclasses.replace(config.sim, p_wd=job.p_wd, seed=job.seed),
        "hyper": config.hyper.replace(gamma_wd=job.gamma_wd, seed=job.seed),
        "split_fractions": config.split_fractions,
        "covariates": covariates,
    })

    row = {"run_id": job.run_id, "p_idx": job.p_idx, "g_idx": job.g_idx, "replicate": job.replicate,
           "seed": job.seed, "gamma_wd": job.gamma_wd, "p_wd": job.p_wd}
    memory = result.memory
    row["d_wd_init"] = memory.get_nested("simulation", "d_wd_init", default=np.nan)
    evaluation = memory.get_nested("evaluation", "result")
    for name in SCORE_COLUMNS + ("MCATE_sq", "FSM_sq"):
        row[name] = getattr(evaluation, name) if evaluation is not None else np.nan

    # with γ_wd = 0 the model is its own ablation
    ablation = memory.get_nested("evaluation_ablation", "result")
    if ablation is None and job.gamma_wd == 0:
        ablation = evaluation
    for name in SCORE_COLUMNS:
        row[f"{name}_ablation"] = getattr(ablation, name) if ablation is not None else np.nan

    row["failed"] = result.failed
    row["error"] = result.error or ""
    if result.failed:
        logger.warning(f"Replicate {job.run_id} failed: {result.error}")
    return row


def _map_jobs(jobs: list[ReplicateJob], workers: int) -> list[dict]:
    progress = dict(total=len(jobs), desc="sweep", disable=not sys.stderr.isatty())
    if workers <= 1:
        return [run_replicate(job) for job in tqdm(jobs, **progress)]
    rows = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_replicate, job) for job in jobs]
        for future in tqdm(as_completed(futures), **progress):
            rows.append(future.result())
    return rows


def aggregate_sweep(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample sd (ddof=1) per (γ_wd, p_wd) over successful replicates."""
    rows = []
    for (gamma, p_wd), group in results.groupby(["gamma_wd", "p_wd"], sort=True):
        ok = group[~group["failed"].astype(bool)]
        row = {"gamma_wd": gamma, "p_wd": p_wd, "n_ok": len(ok), "n_failed": len(group) - len(ok)}
        for name in SCORE_COLUMNS + tuple(f"{c}_ablation" for c in SCORE_COLUMNS):
            values = ok[name].dropna()
            row[f"{name}_mean"] = float(values.mean()) if len(values) else np.nan
            row[f"{name}_sd"] = float(values.std(ddof=1)) if len(values) > 1 else np.nan
        row["d_wd_init_mean"] = float(ok["d_wd_init"].mean()) if len(ok) else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


def _paired_row(comparison: str, gamma: float, p_wd: float, worse: np.ndarray, better: np.ndarray) -> dict:
    """One-sided paired test of worse − better > 0."""
    gaps = worse - better
    n = gaps.size
    row = {"comparison": comparison, "gamma_wd": gamma, "p_wd": p_wd, "n_pairs": n,
           "mean_gap": float(gaps.mean()) if n else np.nan,
           "paired_se": float(gaps.std(ddof=1) / np.sqrt(n)) if n > 1 else np.nan,
           "t_stat": np.nan, "p_value": np.nan}
    if n > 1 and np.any(gaps != gaps[0]):
        test = stats.ttest_rel(worse, better, alternative="greater")
        row["t_stat"], row["p_value"] = float(test.statistic), float(test.pvalue)
    return row


def paired_summary(results: pd.DataFrame) -> pd.DataFrame:
    """
    FSM gaps on identical data:
      ablation   FSM(γ_wd = 0 refit) − FSM(γ_wd) within each replicate
      vs_gamma0  FSM(γ_wd = 0 grid point) − FSM(γ_wd) for the same replicate
    """
    ok = results[~results["failed"].astype(bool)]
    rows = []
    for (gamma, p_wd), group in ok.groupby(["gamma_wd", "p_wd"], sort=True):
        if gamma == 0:
            continue
        pair = group.dropna(subset=["FSM", "FSM_ablation"])
        rows.append(_paired_row("ablation", gamma, p_wd,
                                pair["FSM_ablation"].to_numpy(), pair["FSM"].to_numpy()))
        base = ok[(ok["gamma_wd"] == 0) & (ok["p_wd"] == p_wd)][["replicate", "FSM"]]
        if len(base):
            merged = group[["replicate", "FSM"]].merge(base, on="replicate", suffixes=("", "_gamma0"))
            rows.append(_paired_row("vs_gamma0", gamma, p_wd,
                                    merged["FSM_gamma0"].to_numpy(), merged["FSM"].to_numpy()))
    columns = ["comparison", "gamma_wd", "p_wd", "n_pairs", "mean_gap", "paired_se", "t_stat", "p_value"]
    return pd.DataFrame(rows, columns=columns)


def cmd_sweep(config: RunConfig) -> int:
    out = _out_dir(config)
    jobs = sweep_jobs(config)
    logger.info(f"Sweep: {len(jobs)} replicate runs on {config.sweep.workers} worker(s)")

    rows = _map_jobs(jobs, config.sweep.workers)
    results = pd.DataFrame(rows).sort_values(["p_idx", "g_idx", "replicate"], kind="stable")
    results = results.drop(columns=["p_idx", "g_idx"]).reset_index(drop=True)

    _write_csv(results, out / "sweep_results.csv")
    aggregate = aggregate_sweep(results)
    _write_csv(aggregate, out / "sweep_aggregate.csv")
    _write_csv(paired_summary(results), out / "sweep_paired.csv")

    n_failed = int(results["failed"].sum())
    if n_failed:
        logger.warning(f"{n_failed}/{len(results)} replicate(s) failed")
    if n_failed == len(results):
        logger.error("Every replicate failed")
        return 2
    return 0


# ── theory ────────────────────────────────────────────────────────────────────

def cmd_theory(config: RunConfig) -> int:
    out = _out_dir(config)
    report = run_theory_suite(config.sim, config.theory)
    for name, frame in report.frames().items():
        _write_csv(frame, out / f"theory_{name}.csv")
    for name, count in report.violations().items():
        print(f"{name}: {count} violation(s)")
    report.assert_holds()
    return 0


# ── search ────────────────────────────────────────────────────────────────────

def cmd_search(config: RunConfig) -> int:
    out = _out_dir(config)
    train, val, _ = _load_splits(config)
    result = random_search(train, val, config.search, config.hyper)
    result.to_csv(out / "leaderboard.csv")
    best = result.leaderboard[0]
    (out / "best_config.cfg").write_text(
        format_hyper(result.best, header=f"config {best.config_id}, val_objective {best.val_objective:.6g}"),
        encoding="utf-8",
    )
    print(f"best config_id={best.config_id} val_objective={best.val_objective:.6f}")
    return 0


# ── Dispatch ──────────────────────────────────────────────────────────────────

COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "theory": cmd_theory,
    "search": cmd_search,
}


def run_command(name: str, config: RunConfig) -> int:
    """Run one command and turn any exception into its exit code."""
    if name not in COMMANDS:
        raise ValueError(f"unknown command {name!r}; available: {list(COMMANDS)}")
    try:
        return COMMANDS[name](config)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{name} failed ({type(e).__name__}, exit {code}): {e}")
        return code


def apply_overrides(
    config: RunConfig,
    out: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    if seed is not None:
        config = config.with_seed(seed)
    if out is not None:
        config = config.with_out_dir(out)
    return config
