"""
Pipeline Models — Data Structures for Replicate Pipelines.

Design principles:
  1. Stages communicate only through PipelineMemory (datasets, models and
     scores are large, so memory holds references, never copies)
  2. Every stage returns a StepResult carrying its output plus execution
     metadata (attempt, duration, failure class)
  3. The trace records every step so a sweep can tell a diverged training
     run from a skipped ablation

Step execution states:
  COMPLETED → finished successfully
  FAILED    → raised an exception (captured by the stage wrapper)
  SKIPPED   → condition evaluated to False

Pipeline terminal states:
  COMPLETED → all required steps succeeded
  FAILED    → a required step failed on every attempt
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Optional
import json
import uuid


class StepStatus(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


class PipelineStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class StepResult:
    """Output of one stage execution."""
    step_id: str
    status: StepStatus
    output: dict = field(default_factory=dict)
    error: Optional[str] = None
    error_type: Optional[str] = None
    exit_code: int = 0
    duration_ms: float = 0.0
    stage_name: str = ""
    started_at: str = field(default_factory=lambda: datetime.now().isoformat())
    completed_at: Optional[str] = None
    attempt: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return self.status == StepStatus.COMPLETED

    @property
    def failed(self) -> bool:
        return self.status == StepStatus.FAILED

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "status": self.status.value,
            "error": self.error,
            "error_type": self.error_type,
            "exit_code": self.exit_code,
            "duration_ms": round(self.duration_ms, 1),
            "stage_name": self.stage_name,
            "started_at": self.started_at,
            "completed_at": self.completed_at,
            "attempt": self.attempt,
            "metadata": self.metadata,
        }


@dataclass
class PipelineMemory:
    """
    Shared store for one pipeline run.

    Values are references (datasets, fitted models); `snapshot` only
    records key names and short descriptions for the trace.
    """
    _store: dict = field(default_factory=dict)

    def set(self, key: str, value: Any) -> None:
        self._store[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        return self._store.get(key, default)

    def update(self, data: dict) -> None:
        self._store.update(data)

    def require(self, key: str) -> Any:
        if key not in self._store:
            raise KeyError(f"pipeline memory has no {key!r} (available: {sorted(self._store)})")
        return self._store[key]

    def get_nested(self, *keys: str, default: Any = None) -> Any:
        """memory.get_nested('training', 'report')"""
        current = self._store
        for key in keys:
            if not isinstance(current, dict) or key not in current:
                return default
            current = current[key]
        return current

    def snapshot(self) -> dict:
        return {key: _describe(value) for key, value in self._store.items()}

    def to_dict(self) -> dict:
        return self._store.copy()

    def __contains__(self, key: str) -> bool:
        return key in self._store

    def __repr__(self) -> str:
        return f"PipelineMemory({list(self._store.keys())})"


def _describe(value: Any) -> str:
    if isinstance(value, dict):
        return "{" + ", ".join(sorted(value)) + "}"
    text = repr(value)
    return text if len(text) <= 80 else text[:77] + "..."


@dataclass
class StepTrace:
    step_id: str
    stage_name: str
    status: StepStatus
    input_snapshot: dict
    duration_ms: float
    error: Optional[str]
    error_type: Optional[str]
    started_at: str
    completed_at: Optional[str]
    attempts: int = 1
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "stage_name": self.stage_name,
            "status": self.status.value,
            "input_snapshot": self.input_snapshot,
            "duration_ms": round(self.duration_ms, 1),
            "error": self.error,
            "error_type": self.error_type,
            "started_at": self.started_at,
            "completed_at": self.completed_at,
            "attempts": self.attempts,
            "notes": self.notes,
        }


@dataclass
class PipelineTrace:
    pipeline_id: str = field(default_factory=lambda: str(uuid.uuid4())[:8])
    pipeline_name: str = ""
    status: PipelineStatus = PipelineStatus.RUNNING
    started_at: str = field(default_factory=lambda: datetime.now().isoformat())
    completed_at: Optional[str] = None
    steps: list[StepTrace] = field(default_factory=list)
    total_duration_ms: float = 0.0
    error: Optional[str] = None

    def add_step(self, step_trace: StepTrace) -> None:
        self.steps.append(step_trace)
        self.total_duration_ms += step_trace.duration_ms

    def complete(self, status: PipelineStatus, error: Optional[str] = None) -> None:
        self.status = status
        self.completed_at = datetime.now().isoformat()
        self.error = error

    def step(self, step_id: str) -> Optional[StepTrace]:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "pipeline_id": self.pipeline_id,
            "pipeline_name": self.pipeline_name,
            "status": self.status.value,
            "started_at": self.started_at,
            "completed_at": self.completed_at,
            "steps": [s.to_dict() for s in self.steps],
            "total_duration_ms": round(self.total_duration_ms, 1),
            "error": self.error,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=indent)


@dataclass
class PipelineResult:
    pipeline_id: str
    pipeline_name: str
    status: PipelineStatus
    memory: PipelineMemory
    trace: PipelineTrace
    error: Optional[str] = None
    exit_code: int = 0

    @property
    def succeeded(self) -> bool:
        return self.status == PipelineStatus.COMPLETED

    @property
    def failed(self) -> bool:
        return self.status == PipelineStatus.FAILED
