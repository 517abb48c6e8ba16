"""
Unit Tests — Evaluation Metrics.

Coverage:
  1. EvalGrid: trapezoid weights, construction from a model grid, mismatch
  2. Oracle predictor scores exactly zero
  3. Constant-gap predictor against the closed-form quadrature
  4. MiseCate² ≤ 2·FSMise² on every row for a fitted-shape network
  5. Output tables: metrics row keys, long predictions layout
  6. Halving the grid spacing barely moves the scores of smooth curves
"""
import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.model.network import init_params
from src.survival.metrics import (
    EvalGrid, ModelPredictor, OraclePredictor, aggregate, evaluate_predictor, mise_surv, mpehe,
)
from src.survival.simulate import SimTruth, make_synthetic
from src.utils.config import HyperParams, SimConfig
from src.utils.data_models import Dataset, TimeGrid, split
from src.utils.errors import DataValidationError


def _truth_and_test(n=300, seed=0):
    dataset, truth = make_synthetic(SimConfig(n=n, p=4, seed=seed))
    _, _, test = split(dataset, seed=seed)
    return truth, test


class _ShiftedOracle:
    """Truth for control, truth plus a constant for treated."""

    def __init__(self, truth, gap):
        self.truth, self.gap = truth, gap

    def survival(self, t, features, rows, times):
        return self.truth.survival(t, times, rows) + (self.gap if t == 1 else 0.0)


# ── EvalGrid ──────────────────────────────────────────────────────────────────

class TestEvalGrid:
    def test_trapezoid_weights(self):
        grid = EvalGrid.from_times(np.array([0.0, 1.0, 3.0]))
        np.testing.assert_allclose(grid.weights, [0.5, 1.5, 1.0])
        assert grid.weights.sum() == pytest.approx(3.0)

    def test_integrates_linear_function_exactly(self):
        grid = EvalGrid.uniform(2.0, 7)
        assert float(grid.integrate(grid.times)) == pytest.approx(2.0)

    def test_from_grid_window(self):
        grid = EvalGrid.from_grid(TimeGrid(np.array([0.0, 0.5, 1.0, 2.0])), tau_min=1.5)
        np.testing.assert_allclose(grid.times, [0.0, 0.5, 1.0, 1.5])
        assert grid.tau_min == 1.5

    def test_duplicate_tau_min_collapses(self):
        grid = EvalGrid.from_grid(TimeGrid(np.array([0.0, 0.5, 1.0])), tau_min=1.0)
        np.testing.assert_allclose(grid.times, [0.0, 0.5, 1.0])

    def test_grid_mismatch(self):
        with pytest.raises(DataValidationError, match="grid mismatch"):
            EvalGrid.from_grid(TimeGrid(np.array([0.0, 5.0, 6.0])), tau_min=1.0)

    def test_single_time_rejected(self):
        with pytest.raises(DataValidationError):
            EvalGrid.from_times(np.array([0.0]))

    def test_refinement_changes_scores_little(self):
        truth, test = _truth_and_test(seed=3)
        candidate = OraclePredictor(dataclasses.replace(truth, epsilon=truth.epsilon + 0.3))
        coarse = evaluate_predictor(candidate, truth, test, EvalGrid.uniform(truth.tau_min, 21))
        fine = evaluate_predictor(candidate, truth, test, EvalGrid.uniform(truth.tau_min, 41))
        for name in ("MCATE", "FSM"):
            assert getattr(fine, name) > 0.0
            assert getattr(fine, name) == pytest.approx(getattr(coarse, name), rel=0.01)


# ── Scores ────────────────────────────────────────────────────────────────────

class TestScores:
    def test_oracle_scores_zero(self):
        truth, test = _truth_and_test()
        grid = EvalGrid.uniform(truth.tau_min, 25)
        result = evaluate_predictor(OraclePredictor(truth), truth, test, grid)
        assert result.MCATE == 0.0
        assert result.FSM == 0.0
        assert result.MPEHE == 0.0
        assert result.dominance_holds().all()

    def test_constant_gap_matches_quadrature(self):
        truth, test = _truth_and_test(seed=1)
        gap = 0.1
        grid = EvalGrid.uniform(truth.tau_min, 11)
        result = evaluate_predictor(_ShiftedOracle(truth, gap), truth, test, grid)
        expected = gap * np.sqrt(truth.tau_min)
        assert result.MCATE == pytest.approx(expected)
        assert result.FSM == pytest.approx(expected)
        assert result.MPEHE == pytest.approx(gap ** 2)
        np.testing.assert_allclose(result.mise_surv0, 0.0, atol=1e-15)

    def test_dominance_for_network_predictions(self):
        truth, test = _truth_and_test(seed=2)
        cuts = np.linspace(0.0, 2.0 * truth.tau_min, 6)
        model = init_params(test.d, TimeGrid(cuts), HyperParams(hidden_width=8, seed=4))
        grid = EvalGrid.from_grid(model.grid, truth.tau_min)
        result = evaluate_predictor(ModelPredictor(model), truth, test, grid)
        assert result.dominance_holds().all()
        assert result.MCATE_sq <= 2.0 * result.FSM_sq + 1e-12
        assert result.MCATE > 0.0

    def test_mise_surv_zero_for_identical_curves(self):
        grid = EvalGrid.uniform(1.0, 5)
        curves = np.random.default_rng(0).uniform(size=(3, 5))
        np.testing.assert_array_equal(mise_surv(curves, curves, grid), 0.0)

    def test_mpehe_shape_mismatch(self):
        with pytest.raises(DataValidationError, match="shape mismatch"):
            mpehe(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_aggregate_empty(self):
        with pytest.raises(DataValidationError):
            aggregate(np.array([]), np.array([]))

    def test_row_outside_truth(self):
        truth = SimTruth(np.array([0.0, 0.1]), 0.8, 2.0, 1.0, 0.3, 1.0)
        rows = Dataset(features=np.zeros((1, 1)), treatment=[1], time=[1.0], event=[1], row_ids=[5])
        with pytest.raises(DataValidationError, match="outside"):
            evaluate_predictor(OraclePredictor(truth), truth, rows, EvalGrid.uniform(1.0, 3))


# ── Tables ────────────────────────────────────────────────────────────────────

class TestTables:
    def test_metrics_row(self):
        truth, test = _truth_and_test(seed=3)
        result = evaluate_predictor(OraclePredictor(truth), truth, test, EvalGrid.uniform(truth.tau_min, 5))
        row = result.metrics_row("r0", 3, 0.01, 1.0, 0.2)
        assert list(row)[:8] == ["run_id", "seed", "gamma_wd", "p_wd", "d_wd_init", "MCATE", "MPEHE", "FSM"]
        assert row["run_id"] == "r0"

    def test_predictions_frame_layout(self):
        truth, test = _truth_and_test(seed=4)
        result = evaluate_predictor(OraclePredictor(truth), truth, test, EvalGrid.uniform(truth.tau_min, 6))
        frame = result.predictions_frame()
        assert list(frame.columns) == ["i", "tau", "surv0", "surv1", "cate"]
        assert len(frame) == test.n * 6
        np.testing.assert_array_equal(frame["i"].unique(), test.row_ids)
        np.testing.assert_allclose(frame["cate"], frame["surv1"] - frame["surv0"])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
