"""
Base Stage — Foundation for Pipeline Stages.

A stage is a stateless callable that:
  1. Reads what it needs from PipelineMemory
  2. Does one job (simulate, train, evaluate)
  3. Returns a StepResult whose output the engine writes back to memory

Stages never raise into the engine. Any exception becomes a FAILED
StepResult with the message, the exception class name and the CLI exit
code (1 validation, 2 divergence/runtime, 3 bound violation).

`attempt` is 0 on the first call and increases on engine retries, so a
stage can change strategy on a retry (the train stage halves its
learning rate).
"""
from __future__ import annotations

import logging
import time
from abc import ABC, abstractmethod

from src.pipeline.pipeline_models import PipelineMemory, StepResult, StepStatus
from src.utils.errors import exit_code_for


class BaseStage(ABC):

    def __init__(self):
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    @property
    @abstractmethod
    def name(self) -> str:
        ...

    @property
    def description(self) -> str:
        return ""

    @abstractmethod
    def _run(self, memory: PipelineMemory, attempt: int) -> dict:
        """Do the work and return the output dict for memory."""
        ...

    def execute(self, step_id: str, memory: PipelineMemory, attempt: int = 0) -> StepResult:
        """Called by the engine. Override _run, not this."""
        started_at = time.time()
        self.logger.info(f"Executing {self.name} for step {step_id} (attempt {attempt + 1})")
        try:
            output = self._run(memory, attempt)
        except Exception as e:
            return self._fail(step_id, e, started_at, attempt)
        return StepResult(
            step_id=step_id,
            status=StepStatus.COMPLETED,
            output=output,
            duration_ms=(time.time() - started_at) * 1000,
            stage_name=self.name,
            attempt=attempt,
        )

    def _fail(self, step_id: str, error: Exception, started_at: float, attempt: int) -> StepResult:
        self.logger.error(f"{self.name} failed: {type(error).__name__}: {error}")
        return StepResult(
            step_id=step_id,
            status=StepStatus.FAILED,
            error=str(error),
            error_type=type(error).__name__,
            exit_code=exit_code_for(error),
            duration_ms=(time.time() - started_at) * 1000,
            stage_name=self.name,
            attempt=attempt,
            metadata={"state_saved": getattr(error, "state", None) is not None},
        )

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(name={self.name!r})"
