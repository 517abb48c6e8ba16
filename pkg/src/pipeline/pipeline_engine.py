"""
Pipeline Engine — Runs Replicate Pipelines Step by Step.

Execution loop:
  for each step in definition.steps:
    if step.should_run(memory) is False → SKIPPED
    for attempt in range(step.max_retries):
      result = step.stage.execute(step.step_id, memory, attempt)
      if result.succeeded → write output to memory[step.memory_key], next step
    if every attempt failed:
      required → pipeline FAILED (exit code taken from the failing stage)
      optional → warning, continue

The engine writes per-step metadata (status, attempts, error class) to
memory['_meta'][step_id], so later conditions can look at earlier outcomes.
"""
from __future__ import annotations

import logging
from datetime import datetime

from src.pipeline.pipeline_models import (
    PipelineMemory, PipelineResult, PipelineStatus, PipelineTrace, StepResult, StepStatus, StepTrace,
)
from src.pipeline.pipeline_steps import PipelineDefinition, StageStep

logger = logging.getLogger(__name__)


class PipelineEngine:

    def __init__(self):
        self._pipelines: dict[str, PipelineDefinition] = {}

    def register(self, pipeline: PipelineDefinition) -> None:
        self._pipelines[pipeline.name] = pipeline
        logger.debug(f"Registered pipeline: {pipeline.name} ({len(pipeline.steps)} steps)")

    def run(self, pipeline_name: str, initial_input: dict) -> PipelineResult:
        if pipeline_name not in self._pipelines:
            raise ValueError(f"Pipeline '{pipeline_name}' not registered. "
                             f"Available: {list(self._pipelines.keys())}")

        pipeline = self._pipelines[pipeline_name]
        memory = PipelineMemory()
        memory.update(initial_input)
        memory.set("_meta", {})
        trace = PipelineTrace(pipeline_name=pipeline_name)

        logger.info(f"Starting pipeline: {pipeline_name} (id={trace.pipeline_id})")
        exit_code = 0
        try:
            status, exit_code = self._execute(pipeline, memory, trace)
        except Exception as e:
            logger.error(f"Pipeline {pipeline_name} crashed: {e}", exc_info=True)
            trace.complete(PipelineStatus.FAILED, error=str(e))
            status, exit_code = PipelineStatus.FAILED, 2

        return PipelineResult(
            pipeline_id=trace.pipeline_id,
            pipeline_name=pipeline_name,
            status=status,
            memory=memory,
            trace=trace,
            error=trace.error,
            exit_code=exit_code,
        )

    def _execute(
        self,
        pipeline: PipelineDefinition,
        memory: PipelineMemory,
        trace: PipelineTrace,
    ) -> tuple[PipelineStatus, int]:
        for step in pipeline.steps:
            if not step.should_run(memory):
                logger.info(f"Step {step.step_id} SKIPPED (condition=False)")
                self._record_skipped(step, memory, trace)
                continue

            result = self._execute_step(step, memory, trace)

            if result.failed and step.required:
                error = f"Required step '{step.step_id}' failed: {result.error}"
                logger.error(error)
                trace.complete(PipelineStatus.FAILED, error=error)
                return PipelineStatus.FAILED, result.exit_code

            if result.failed:
                logger.warning(f"Optional step '{step.step_id}' failed, continuing")

        trace.complete(PipelineStatus.COMPLETED)
        return PipelineStatus.COMPLETED, 0

    def _execute_step(self, step: StageStep, memory: PipelineMemory, trace: PipelineTrace) -> StepResult:
        input_snapshot = memory.snapshot()
        result: StepResult = None
        total_ms = 0.0

        for attempt in range(step.max_retries):
            if attempt > 0:
                logger.info(f"Retrying step {step.step_id} (attempt {attempt + 1}/{step.max_retries})")
            result = step.stage.execute(step.step_id, memory, attempt)
            result.completed_at = datetime.now().isoformat()
            total_ms += result.duration_ms
            if result.succeeded:
                memory.set(step.memory_key, result.output)
                logger.info(f"Step {step.step_id} COMPLETED ({result.duration_ms:.0f}ms)")
                break
            logger.warning(f"Step {step.step_id} failed (attempt {attempt + 1}): {result.error}")

        memory.get("_meta")[step.step_id] = {
            "status": result.status.value,
            "attempts": result.attempt + 1,
            "error_type": result.error_type,
        }
        trace.add_step(StepTrace(
            step_id=step.step_id,
            stage_name=step.stage.name,
            status=result.status,
            input_snapshot=input_snapshot,
            duration_ms=total_ms,
            error=result.error,
            error_type=result.error_type,
            started_at=result.started_at,
            completed_at=result.completed_at,
            attempts=result.attempt + 1,
        ))
        return result

    @staticmethod
    def _record_skipped(step: StageStep, memory: PipelineMemory, trace: PipelineTrace) -> None:
        now = datetime.now().isoformat()
        memory.get("_meta")[step.step_id] = {"status": StepStatus.SKIPPED.value, "attempts": 0,
                                             "error_type": None}
        trace.add_step(StepTrace(
            step_id=step.step_id,
            stage_name=step.stage.name,
            status=StepStatus.SKIPPED,
            input_snapshot={},
            duration_ms=0.0,
            error=None,
            error_type=None,
            started_at=now,
            completed_at=now,
            attempts=0,
            notes="Condition evaluated to False",
        ))
