"""
Pipeline Steps — Stages Wrapped with Execution Policy.

StageStep policy:
  max_retries  total attempts (1 = no retry); the attempt index is passed
               to the stage
  required     the pipeline fails if this step fails on every attempt
  condition    callable(memory) → bool; the step is SKIPPED when False
  memory_key   where the engine writes the step output

Steps are plain data and do not know about each other; the engine runs
them in order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from src.pipeline.pipeline_models import PipelineMemory
from src.stages.base_stage import BaseStage


@dataclass
class StageStep:
    step_id: str
    stage: BaseStage
    memory_key: str
    description: str = ""
    max_retries: int = 1
    required: bool = True
    condition: Optional[Callable[[PipelineMemory], bool]] = None

    def should_run(self, memory: PipelineMemory) -> bool:
        if self.condition is None:
            return True
        try:
            return bool(self.condition(memory))
        except Exception:
            return False

    def __repr__(self) -> str:
        return f"StageStep(id={self.step_id!r}, stage={self.stage.name!r})"


@dataclass
class PipelineDefinition:
    name: str
    steps: list[StageStep]
    description: str = ""
    metadata: dict = field(default_factory=dict)

    def get_step(self, step_id: str) -> Optional[StageStep]:
        for step in self.steps:
            if step.step_id == step_id:
                return step
        return None

    def step_ids(self) -> list[str]:
        return [s.step_id for s in self.steps]

    def __repr__(self) -> str:
        return f"PipelineDefinition(name={self.name!r}, steps={self.step_ids()})"
