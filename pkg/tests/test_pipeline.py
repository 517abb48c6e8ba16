"""
Unit Tests — Replicate Pipeline Engine.

Coverage:
  1. PipelineMemory: get/set/require/nested/snapshot
  2. PipelineTrace: step recording, JSON export
  3. BaseStage: exceptions become FAILED results with exit codes
  4. StageStep / PipelineDefinition: conditions, lookup
  5. PipelineEngine: mock stages, retries, skips, optional and required failures
  6. replicate_pipeline: step layout, ablation conditions, a tiny real run
"""
import json
import sys
from pathlib import Path
from unittest.mock import MagicMock

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.model.trainer import TrainReport
from src.pipeline.definitions import REPLICATE, replicate_pipeline
from src.pipeline.pipeline_engine import PipelineEngine
from src.pipeline.pipeline_models import (
    PipelineMemory, PipelineStatus, PipelineTrace, StepResult, StepStatus, StepTrace,
)
from src.pipeline.pipeline_steps import PipelineDefinition, StageStep
from src.stages.base_stage import BaseStage
from src.stages.train_stage import TrainStage
from src.utils.config import HyperParams, SimConfig, WeightMode
from src.utils.errors import DataValidationError, TrainingDivergedError


# ── PipelineMemory ────────────────────────────────────────────────────────────

class TestPipelineMemory:
    def test_set_and_get(self):
        m = PipelineMemory()
        m.set("key", {"value": 42})
        assert m.get("key") == {"value": 42}
        assert m.get("missing", "default") == "default"

    def test_update_and_contains(self):
        m = PipelineMemory()
        m.update({"a": 1, "b": 2})
        assert "a" in m
        assert "c" not in m
        assert m.to_dict() == {"a": 1, "b": 2}

    def test_require_missing_key(self):
        with pytest.raises(KeyError, match="no 'simulation'"):
            PipelineMemory().require("simulation")

    def test_get_nested(self):
        m = PipelineMemory()
        m.set("evaluation", {"MCATE": 0.1})
        assert m.get_nested("evaluation", "MCATE") == 0.1
        assert m.get_nested("evaluation", "FSM", default=-1) == -1
        assert m.get_nested("missing", "key") is None

    def test_snapshot_describes_values(self):
        m = PipelineMemory()
        m.update({"simulation": {"train": 1, "test": 2}, "blob": "x" * 200})
        snap = m.snapshot()
        assert snap["simulation"] == "{test, train}"
        assert len(snap["blob"]) == 80
        assert snap["blob"].endswith("...")


# ── PipelineTrace ─────────────────────────────────────────────────────────────

class TestPipelineTrace:
    def _step(self, step_id, duration=5.0):
        return StepTrace(step_id=step_id, stage_name="Stage", status=StepStatus.COMPLETED,
                         input_snapshot={}, duration_ms=duration, error=None, error_type=None,
                         started_at="t0", completed_at="t1")

    def test_add_step_accumulates_duration(self):
        trace = PipelineTrace(pipeline_name="p")
        trace.add_step(self._step("a", 5.0))
        trace.add_step(self._step("b", 7.0))
        assert trace.total_duration_ms == 12.0
        assert trace.step("b").step_id == "b"
        assert trace.step("zzz") is None

    def test_to_json_valid(self):
        trace = PipelineTrace(pipeline_name="p")
        trace.add_step(self._step("a"))
        trace.complete(PipelineStatus.COMPLETED)
        parsed = json.loads(trace.to_json())
        assert parsed["pipeline_name"] == "p"
        assert parsed["status"] == "completed"
        assert len(parsed["steps"]) == 1

    def test_step_states_are_outcomes_only(self):
        assert {s.value for s in StepStatus} == {"completed", "failed", "skipped"}


# ── BaseStage ─────────────────────────────────────────────────────────────────

class _RaisingStage(BaseStage):
    def __init__(self, error):
        super().__init__()
        self.error = error

    @property
    def name(self):
        return "RaisingStage"

    def _run(self, memory, attempt):
        raise self.error


class TestBaseStage:
    @pytest.mark.parametrize("error,code", [
        (DataValidationError("bad row"), 1),
        (TrainingDivergedError("nan"), 2),
        (RuntimeError("boom"), 2),
    ])
    def test_exception_becomes_failed_result(self, error, code):
        result = _RaisingStage(error).execute("s", PipelineMemory(), attempt=1)
        assert result.failed
        assert result.exit_code == code
        assert result.error_type == type(error).__name__
        assert result.attempt == 1

    def test_diverged_state_is_flagged(self):
        error = TrainingDivergedError("nan", state={"w": 1}, report=TrainReport())
        result = _RaisingStage(error).execute("s", PipelineMemory())
        assert result.metadata["state_saved"] is True

    def test_missing_memory_key_fails_cleanly(self):
        result = TrainStage().execute("train", PipelineMemory())
        assert result.failed
        assert result.error_type == "KeyError"


# ── Steps ─────────────────────────────────────────────────────────────────────

def make_mock_stage(name: str, output: dict) -> MagicMock:
    """A stage double that always succeeds with `output`."""
    stage = MagicMock(spec=BaseStage)
    stage.name = name

    def execute(step_id, memory, attempt=0):
        return StepResult(step_id=step_id, status=StepStatus.COMPLETED, output=output,
                          duration_ms=1.0, stage_name=name, attempt=attempt)

    stage.execute = MagicMock(side_effect=execute)
    return stage


def make_failing_stage(name: str, exit_code: int = 2, successes_after: int = None) -> MagicMock:
    """Fails on every attempt, or until `successes_after` attempts have failed."""
    stage = MagicMock(spec=BaseStage)
    stage.name = name

    def execute(step_id, memory, attempt=0):
        if successes_after is not None and attempt >= successes_after:
            return StepResult(step_id=step_id, status=StepStatus.COMPLETED, output={"attempt": attempt},
                              stage_name=name, attempt=attempt)
        return StepResult(step_id=step_id, status=StepStatus.FAILED, error="simulated failure",
                          error_type="RuntimeError", exit_code=exit_code, stage_name=name, attempt=attempt)

    stage.execute = MagicMock(side_effect=execute)
    return stage


class TestStageStep:
    def test_condition_true_and_false(self):
        step = StageStep("s", make_mock_stage("A", {}), "k", condition=lambda m: m.get("flag") is True)
        m = PipelineMemory()
        m.set("flag", True)
        assert step.should_run(m) is True
        m.set("flag", False)
        assert step.should_run(m) is False

    def test_condition_error_skips(self):
        step = StageStep("s", make_mock_stage("A", {}), "k", condition=lambda m: 1 / 0)
        assert step.should_run(PipelineMemory()) is False

    def test_no_condition_always_runs(self):
        assert StageStep("s", make_mock_stage("A", {}), "k").should_run(PipelineMemory()) is True

    def test_definition_lookup(self):
        definition = PipelineDefinition("p", [StageStep("a", make_mock_stage("A", {}), "ka"),
                                              StageStep("b", make_mock_stage("B", {}), "kb")])
        assert definition.step_ids() == ["a", "b"]
        assert definition.get_step("b").memory_key == "kb"
        assert definition.get_step("c") is None


# ── Engine ────────────────────────────────────────────────────────────────────

class TestPipelineEngine:
    def setup_method(self):
        self.engine = PipelineEngine()

    def _run(self, steps, initial=None):
        self.engine.register(PipelineDefinition(name="test", steps=steps))
        return self.engine.run("test", initial or {})

    def test_register_and_run(self):
        result = self._run([StageStep("simulate", make_mock_stage("Sim", {"n": 10}), "simulation")],
                           {"seed": 1})
        assert result.status == PipelineStatus.COMPLETED
        assert result.exit_code == 0
        assert result.memory.get("simulation") == {"n": 10}
        assert result.memory.get("seed") == 1

    def test_meta_records_outcomes(self):
        result = self._run([StageStep("a", make_mock_stage("A", {}), "ka")])
        assert result.memory.get("_meta")["a"] == {"status": "completed", "attempts": 1, "error_type": None}

    def test_failed_required_step_fails_pipeline(self):
        after = make_mock_stage("After", {})
        result = self._run([
            StageStep("train", make_failing_stage("Train", exit_code=2), "training", max_retries=2),
            StageStep("evaluate", after, "evaluation"),
        ])
        assert result.status == PipelineStatus.FAILED
        assert result.exit_code == 2
        assert "train" in result.error
        after.execute.assert_not_called()
        assert result.memory.get("_meta")["train"]["attempts"] == 2

    def test_validation_exit_code_propagates(self):
        result = self._run([StageStep("simulate", make_failing_stage("Sim", exit_code=1), "simulation")])
        assert result.exit_code == 1

    def test_retry_passes_attempt_index(self):
        stage = make_failing_stage("Train", successes_after=1)
        result = self._run([StageStep("train", stage, "training", max_retries=3)])
        assert result.succeeded
        assert result.memory.get("training") == {"attempt": 1}
        assert [c.args[2] for c in stage.execute.call_args_list] == [0, 1]
        assert result.trace.step("train").attempts == 2

    def test_failed_optional_step_continues(self):
        result = self._run([
            StageStep("ablation", make_failing_stage("Ablation"), "training_ablation", required=False),
            StageStep("final", make_mock_stage("Final", {"ok": True}), "final"),
        ])
        assert result.status == PipelineStatus.COMPLETED
        assert result.memory.get("final") == {"ok": True}
        assert "training_ablation" not in result.memory
        assert result.memory.get("_meta")["ablation"]["status"] == "failed"

    def test_skipped_step(self):
        skipped = make_mock_stage("A", {})
        result = self._run([
            StageStep("always_skip", skipped, "skipped", condition=lambda m: False),
            StageStep("always_run", make_mock_stage("B", {"ran": True}), "ran"),
        ])
        assert result.status == PipelineStatus.COMPLETED
        assert result.memory.get("skipped") is None
        skipped.execute.assert_not_called()
        assert result.trace.step("always_skip").status == StepStatus.SKIPPED
        assert result.memory.get("_meta")["always_skip"]["attempts"] == 0

    def test_crashing_stage_fails_with_runtime_code(self):
        stage = MagicMock(spec=BaseStage)
        stage.name = "Crash"
        stage.execute.side_effect = RuntimeError("unexpected")
        result = self._run([StageStep("crash", stage, "k")])
        assert result.failed
        assert result.exit_code == 2

    def test_unregistered_pipeline_raises(self):
        with pytest.raises(ValueError, match="not registered"):
            self.engine.run("nonexistent", {})

    def test_trace_captures_all_steps(self):
        steps = [StageStep(f"step{i}", make_mock_stage(f"S{i}", {"i": i}), f"k{i}") for i in range(3)]
        result = self._run(steps)
        assert len(result.trace.steps) == 3
        assert result.trace.total_duration_ms == pytest.approx(3.0)


# ── Replicate definition ──────────────────────────────────────────────────────

TINY_SIM = SimConfig(n=150, p=3, seed=0)
TINY_HYPER = HyperParams(n_durations=5, hidden_width=8, max_epochs=2, batch_size=64,
                         gamma_wd=0.1, sinkhorn_max_iter=50, weight_mode=WeightMode.UNIFORM, seed=0)


class TestReplicateDefinition:
    def test_steps_with_ablation(self):
        w = replicate_pipeline()
        assert w.name == REPLICATE
        assert w.step_ids() == ["simulate", "train", "evaluate", "train_ablation", "evaluate_ablation"]
        assert w.get_step("train").max_retries == 2
        assert not w.get_step("train_ablation").required

    def test_steps_without_ablation(self):
        assert replicate_pipeline(with_ablation=False).step_ids() == ["simulate", "train", "evaluate"]

    def test_ablation_skipped_when_gamma_is_zero(self):
        step = replicate_pipeline().get_step("train_ablation")
        m = PipelineMemory()
        m.set("hyper", TINY_HYPER.replace(gamma_wd=0.0))
        assert step.should_run(m) is False
        m.set("hyper", TINY_HYPER)
        assert step.should_run(m) is True

    def test_ablation_stage_pins_gamma(self, monkeypatch):
        seen = []

        def fake_fit(train, val, hyper):
            seen.append(hyper)
            return "model", "report"

        monkeypatch.setattr("src.stages.train_stage.fit", fake_fit)
        m = PipelineMemory()
        m.update({"simulation": {"train": None, "val": None}, "hyper": TINY_HYPER})
        output = TrainStage(gamma_override=0.0)._run(m, attempt=2)
        assert seen[0].gamma_wd == 0.0
        assert seen[0].lr == pytest.approx(TINY_HYPER.lr / 4)
        assert output["hyper"] is seen[0]

    def test_tiny_replicate_runs_end_to_end(self):
        engine = PipelineEngine()
        engine.register(replicate_pipeline())
        result = engine.run(REPLICATE, {"sim_config": TINY_SIM, "hyper": TINY_HYPER})
        assert result.succeeded, result.error
        for key in ("simulation", "training", "evaluation", "training_ablation", "evaluation_ablation"):
            assert key in result.memory
        assert result.memory.get("training_ablation")["hyper"].gamma_wd == 0.0
        assert result.memory.get_nested("evaluation", "MCATE") >= 0.0
        test = result.memory.get("simulation")["test"]
        assert len(result.memory.get("evaluation")["result"].mise_cate) == test.n


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
