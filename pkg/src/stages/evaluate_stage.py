"""
Evaluate Stage — Score a Trained Model Against the Simulated Truth.

The evaluation window is [0, τ_min] (τ_min from the truth), integrated
on the model's own grid knots inside the window plus τ_min itself.

Output contract:
  {"result": EvaluationResult, "MCATE": float, "MPEHE": float, "FSM": float}
"""
from __future__ import annotations

from src.pipeline.pipeline_models import PipelineMemory
from src.stages.base_stage import BaseStage
from src.survival.metrics import EvalGrid, ModelPredictor, evaluate_predictor


class EvaluateStage(BaseStage):

    def __init__(self, training_key: str = "training"):
        super().__init__()
        self.training_key = training_key

    @property
    def name(self) -> str:
        return f"EvaluateStage({self.training_key})"

    def _run(self, memory: PipelineMemory, attempt: int) -> dict:
        simulation = memory.require("simulation")
        model = memory.require(self.training_key)["model"]
        truth = simulation["truth"]

        grid = EvalGrid.from_grid(model.grid, truth.tau_min)
        result = evaluate_predictor(ModelPredictor(model, model.hyper.interpolation),
                                    truth, simulation["test"], grid)
        violations = int((~result.dominance_holds()).sum())
        if violations:
            self.logger.warning(f"{violations} individual(s) break MiseCate² ≤ 2·FSMise²")
        return {"result": result, "MCATE": result.MCATE, "MPEHE": result.MPEHE, "FSM": result.FSM}
