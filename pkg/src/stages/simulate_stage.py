"""
Simulate Stage — Synthetic or Semi-Synthetic Replicate Data.

Reads from memory:
  sim_config       SimConfig (seed already derived for this replicate)
  split_fractions  (train, val, test), default (0.6, 0.2, 0.2)
  covariates       optional path or DataFrame; when present the covariates
                   are real and everything downstream is simulated

Output contract (written to memory as 'simulation'):
  {
    "dataset":   Dataset with split tags,
    "train", "val", "test": Dataset,
    "truth":     SimTruth over every row,
    "d_wd_init": Sinkhorn divergence between the two feature clouds,
    "censoring": achieved censored fraction,
    "treated":   treated fraction
  }
"""
from __future__ import annotations

from src.pipeline.pipeline_models import PipelineMemory
from src.stages.base_stage import BaseStage
from src.survival.simulate import initial_wasserstein, make_semisynthetic, make_synthetic
from src.utils.data_models import split, tag_splits


class SimulateStage(BaseStage):

    @property
    def name(self) -> str:
        return "SimulateStage"

    @property
    def description(self) -> str:
        return "Draws covariates, treatment, event and censoring times for one replicate"

    def _run(self, memory: PipelineMemory, attempt: int) -> dict:
        config = memory.require("sim_config")
        covariates = memory.get("covariates")
        if covariates is not None:
            dataset, truth = make_semisynthetic(covariates, config)
        else:
            dataset, truth = make_synthetic(config)

        fractions = tuple(memory.get("split_fractions", (0.6, 0.2, 0.2)))
        train, val, test = split(dataset, fractions, seed=config.seed)
        d_wd_init = initial_wasserstein(dataset)
        self.logger.info(f"Replicate data ready: n={dataset.n}, d_WD^init={d_wd_init:.4f}")
        return {
            "dataset": tag_splits(train, val, test),
            "train": train,
            "val": val,
            "test": test,
            "truth": truth,
            "d_wd_init": d_wd_init,
            "censoring": dataset.censoring_fraction,
            "treated": dataset.treated_fraction,
        }
