"""
Pipeline Definitions — One Experiment Replicate.

replicate (3 or 5 steps):
  simulate → train → evaluate [→ train_ablation → evaluate_ablation]

  - simulate is required; nothing downstream makes sense without data
  - train is required and retried with a halved learning rate on failure
  - evaluate is required
  - train_ablation/evaluate_ablation are optional: they refit the same
    architecture with γ_wd = 0 on the same data, so tuned and ablation
    scores are a paired comparison. They are skipped when ablation is off
    or the main model already has γ_wd = 0.

Initial memory contract:
  {"sim_config": SimConfig, "hyper": HyperParams,
   "split_fractions": (train, val, test), "covariates": optional}
"""
from __future__ import annotations

from src.pipeline.pipeline_models import PipelineMemory
from src.pipeline.pipeline_steps import PipelineDefinition, StageStep
from src.stages.evaluate_stage import EvaluateStage
from src.stages.simulate_stage import SimulateStage
from src.stages.train_stage import TrainStage

REPLICATE = "replicate"


def _ablation_wanted(memory: PipelineMemory) -> bool:
    return memory.get("hyper").gamma_wd > 0


def _ablation_trained(memory: PipelineMemory) -> bool:
    return "training_ablation" in memory


def replicate_pipeline(with_ablation: bool = True, train_retries: int = 2) -> PipelineDefinition:
    steps = [
        StageStep(step_id="simulate", stage=SimulateStage(), memory_key="simulation",
                  description="Simulate covariates, treatment and censored outcomes"),
        StageStep(step_id="train", stage=TrainStage(), memory_key="training",
                  description="Fit SurvCaus with the configured γ_wd",
                  max_retries=train_retries),
        StageStep(step_id="evaluate", stage=EvaluateStage("training"), memory_key="evaluation",
                  description="MCATE, MPEHE and FSM on the test split"),
    ]
    if with_ablation:
        steps += [
            StageStep(step_id="train_ablation", stage=TrainStage(gamma_override=0.0),
                      memory_key="training_ablation",
                      description="Refit with γ_wd = 0 on the same data",
                      max_retries=train_retries, required=False, condition=_ablation_wanted),
            StageStep(step_id="evaluate_ablation", stage=EvaluateStage("training_ablation"),
                      memory_key="evaluation_ablation",
                      description="Scores of the γ_wd = 0 model",
                      required=False, condition=_ablation_trained),
        ]
    return PipelineDefinition(
        name=REPLICATE,
        steps=steps,
        description="simulate → train → evaluate, optionally with a γ_wd = 0 ablation",
        metadata={"with_ablation": with_ablation},
    )
