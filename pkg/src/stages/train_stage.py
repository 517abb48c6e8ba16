"""
Train Stage — Fit SurvCaus on the Replicate's Train/Validation Split.

Reads 'hyper' and memory['simulation'] ('train', 'val').

`gamma_override` pins the balancing weight, which is how the ablation
step trains the γ_wd = 0 model on exactly the same data.

On a retry (attempt ≥ 1) the learning rate is halved once per attempt;
a TrainingDivergedError on the last attempt reaches the engine as a
FAILED step with exit code 2.

Output contract:
  {"model": SurvCausNet, "report": TrainReport, "hyper": HyperParams actually used}
"""
from __future__ import annotations

from typing import Optional

from src.model.trainer import fit
from src.pipeline.pipeline_models import PipelineMemory
from src.stages.base_stage import BaseStage


class TrainStage(BaseStage):

    def __init__(self, gamma_override: Optional[float] = None):
        super().__init__()
        self.gamma_override = gamma_override

    @property
    def name(self) -> str:
        return "TrainStage" if self.gamma_override is None else f"TrainStage(gamma_wd={self.gamma_override:g})"

    def _run(self, memory: PipelineMemory, attempt: int) -> dict:
        simulation = memory.require("simulation")
        hyper = memory.require("hyper")
        changes = {}
        if self.gamma_override is not None:
            changes["gamma_wd"] = self.gamma_override
        if attempt > 0:
            changes["lr"] = hyper.lr / (2 ** attempt)
            self.logger.warning(f"Retry {attempt}: learning rate lowered to {changes['lr']:g}")
        if changes:
            hyper = hyper.replace(**changes)

        model, report = fit(simulation["train"], simulation["val"], hyper)
        return {"model": model, "report": report, "hyper": hyper}
