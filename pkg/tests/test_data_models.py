"""
Unit Tests — Data Containers, Validation and Splitting.

Coverage:
  1. validate_dataset: well-formed rows, each rejection path
  2. split: sizes, determinism, disjointness, stratification, infeasible n
  3. TimeGrid / DiscreteSurvivalOutput / SurvivalCurve invariants
  4. interpolate_survival: step and linear modes, horizon extrapolation
  5. CSV round-trip through read_dataset_csv
"""
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.utils.data_models import (
    Dataset, DiscreteSurvivalOutput, FeatureScaler, SurvivalCurve, TimeGrid,
    check_discrete_output, interpolate_survival, read_dataset_csv, split, splits_from_tags,
    tag_splits, validate_dataset, write_dataset_csv,
)
from src.utils.errors import DataValidationError


def _rows(**overrides):
    rows = [
        {"x0": 0.1, "x1": -1.0, "t": 0, "y": 1.0, "delta": 1},
        {"x0": 0.4, "x1": 2.0, "t": 1, "y": 2.0, "delta": 1},
        {"x0": -0.3, "x1": 0.5, "t": 0, "y": 0.5, "delta": 0},
    ]
    for key, value in overrides.items():
        rows[1][key] = value
    return rows


def _random_dataset(n=1000, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        features=rng.normal(size=(n, d)),
        treatment=rng.integers(0, 2, size=n),
        time=rng.exponential(size=n),
        event=rng.integers(0, 2, size=n),
    )


# ── validate_dataset ─────────────────────────────────────────────────────────

class TestValidateDataset:
    def test_three_well_formed_rows(self):
        ds = validate_dataset(_rows())
        assert ds.n == 3
        assert ds.d == 2
        np.testing.assert_array_equal(ds.treatment, [0, 1, 0])
        np.testing.assert_array_equal(ds.time, [1.0, 2.0, 0.5])
        np.testing.assert_array_equal(ds.event, [1, 1, 0])

    def test_row_order_preserved(self):
        ds = validate_dataset(_rows())
        np.testing.assert_array_equal(ds.features[:, 0], [0.1, 0.4, -0.3])
        np.testing.assert_array_equal(ds.row_ids, [0, 1, 2])

    def test_accepts_dataframe(self):
        ds = validate_dataset(pd.DataFrame(_rows()))
        assert ds.feature_names == ("x0", "x1")

    def test_negative_time(self):
        with pytest.raises(DataValidationError, match="negative time") as info:
            validate_dataset(_rows(y=-1.0))
        assert info.value.row == 1

    def test_zero_time_with_event_is_kept(self):
        ds = validate_dataset(_rows(y=0.0))
        assert ds.time[1] == 0.0

    def test_non_binary_treatment(self):
        with pytest.raises(DataValidationError, match="non-binary treatment"):
            validate_dataset(_rows(t=2))

    def test_non_binary_event(self):
        with pytest.raises(DataValidationError, match="non-binary event"):
            validate_dataset(_rows(delta=0.5))

    def test_non_finite_feature(self):
        with pytest.raises(DataValidationError, match="non-finite feature"):
            validate_dataset(_rows(x1=float("nan")))

    def test_all_treated_is_empty_control(self):
        rows = [dict(r, t=1) for r in _rows()]
        with pytest.raises(DataValidationError, match="empty control group"):
            validate_dataset(rows)

    def test_all_control_is_empty_treated(self):
        rows = [dict(r, t=0) for r in _rows()]
        with pytest.raises(DataValidationError, match="empty treated group"):
            validate_dataset(rows)

    def test_missing_column(self):
        rows = [{k: v for k, v in r.items() if k != "delta"} for r in _rows()]
        with pytest.raises(DataValidationError, match="missing required columns"):
            validate_dataset(rows)

    def test_unknown_split_tag(self):
        rows = [dict(r, split="holdout") for r in _rows()]
        with pytest.raises(DataValidationError, match="unknown split tags"):
            validate_dataset(rows)

    def test_arrays_are_read_only(self):
        ds = validate_dataset(_rows())
        with pytest.raises(ValueError):
            ds.time[0] = 5.0


# ── split ─────────────────────────────────────────────────────────────────────

class TestSplit:
    def test_sizes_600_200_200(self):
        train, val, test = split(_random_dataset(), (0.6, 0.2, 0.2), seed=7)
        assert (train.n, val.n, test.n) == (600, 200, 200)

    def test_deterministic_given_seed(self):
        ds = _random_dataset()
        a = split(ds, seed=7)
        b = split(ds, seed=7)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.row_ids, y.row_ids)

    def test_different_seed_changes_assignment(self):
        ds = _random_dataset()
        assert not np.array_equal(split(ds, seed=1)[0].row_ids, split(ds, seed=2)[0].row_ids)

    def test_disjoint_and_covering(self):
        ds = _random_dataset()
        parts = split(ds, seed=3)
        ids = np.concatenate([p.row_ids for p in parts])
        assert sorted(ids.tolist()) == list(range(ds.n))

    def test_every_split_has_both_arms(self):
        for part in split(_random_dataset(n=50), seed=0):
            assert set(part.treatment.tolist()) == {0, 1}

    def test_split_tags(self):
        train, val, test = split(_random_dataset(), seed=0)
        assert set(train.split) == {"train"}
        assert set(val.split) == {"val"}
        assert set(test.split) == {"test"}

    def test_three_rows_is_infeasible(self):
        ds = Dataset(features=np.zeros((3, 1)), treatment=[1, 1, 0], time=[1, 2, 3], event=[1, 1, 1])
        with pytest.raises(DataValidationError):
            split(ds, (0.6, 0.2, 0.2), seed=0)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(DataValidationError, match="summing to 1"):
            split(_random_dataset(), (0.5, 0.2, 0.2))

    def test_tag_and_untag_roundtrip_order(self):
        ds = _random_dataset(n=100)
        tagged = tag_splits(*split(ds, seed=4))
        np.testing.assert_array_equal(tagged.row_ids, np.arange(100))
        np.testing.assert_array_equal(tagged.time, ds.time)
        train, val, test = splits_from_tags(tagged)
        assert train.n + val.n + test.n == 100

    def test_feature_names_survive_split_and_tagging(self):
        ds = _random_dataset(n=100)
        ds = Dataset(features=ds.features, treatment=ds.treatment, time=ds.time, event=ds.event,
                     feature_names=("age", "dose", "score"))
        parts = split(ds, seed=4)
        assert all(p.feature_names == ("age", "dose", "score") for p in parts)
        tagged = tag_splits(*parts)
        assert tagged.feature_names == ("age", "dose", "score")
        assert splits_from_tags(tagged)[2].feature_names == ("age", "dose", "score")


# ── Grid and outputs ──────────────────────────────────────────────────────────

class TestTimeGrid:
    def test_basic(self):
        grid = TimeGrid(np.array([0.0, 1.0, 2.5]))
        assert grid.m == 2
        assert grid.horizon == 2.5
        np.testing.assert_allclose(grid.widths, [1.0, 1.5])

    @pytest.mark.parametrize("cuts", [[0.0, 1.0], [0.5, 1.0, 2.0], [0.0, 2.0, 1.0], [0.0, 1.0, 1.0]])
    def test_invalid_cuts(self, cuts):
        with pytest.raises(DataValidationError):
            TimeGrid(np.array(cuts))

    def test_equality_and_hash(self):
        a, b = TimeGrid(np.array([0.0, 1.0, 2.0])), TimeGrid(np.array([0.0, 1.0, 2.0]))
        assert a == b
        assert hash(a) == hash(b)


class TestDiscreteSurvivalOutput:
    def test_survival_by_bin(self):
        out = DiscreteSurvivalOutput(np.array([0.2, 0.3, 0.5]))
        assert out.survival(0) == 1.0
        assert out.survival(1) == pytest.approx(0.8)
        assert out.survival(2) == pytest.approx(0.5)
        assert out.survival(3) == 0.0
        np.testing.assert_allclose(out.survival_values(), [1.0, 0.8, 0.5])

    def test_checker_accepts_valid_output(self):
        check_discrete_output(DiscreteSurvivalOutput(np.array([0.1, 0.6, 0.3])))

    def test_checker_rejects_unnormalized(self):
        with pytest.raises(AssertionError, match="sum"):
            check_discrete_output(DiscreteSurvivalOutput(np.array([0.1, 0.6, 0.6])))

    def test_bin_out_of_range(self):
        with pytest.raises(IndexError):
            DiscreteSurvivalOutput(np.array([0.5, 0.5])).survival(3)


class TestInterpolation:
    cuts = np.array([0.0, 1.0, 2.0])
    values = np.array([1.0, 0.5, 0.2])

    def test_step_uses_right_cut_of_interval(self):
        out = interpolate_survival(self.cuts, self.values, np.array([0.0, 0.5, 1.0, 1.5]), "step")
        np.testing.assert_allclose(out, [1.0, 0.5, 0.5, 0.2])

    def test_linear_between_knots(self):
        out = interpolate_survival(self.cuts, self.values, np.array([0.0, 0.5, 1.0, 1.5, 2.0]), "linear")
        np.testing.assert_allclose(out, [1.0, 0.75, 0.5, 0.35, 0.2])

    @pytest.mark.parametrize("mode", ["step", "linear"])
    def test_beyond_horizon_holds_last_value(self, mode):
        out = interpolate_survival(self.cuts, self.values, np.array([5.0]), mode)
        np.testing.assert_allclose(out, [0.2])

    def test_matrix_values(self):
        values = np.vstack([self.values, [1.0, 0.9, 0.8]])
        out = interpolate_survival(self.cuts, values, np.array([0.5, 3.0]), "linear")
        np.testing.assert_allclose(out, [[0.75, 0.2], [0.95, 0.8]])

    def test_survival_curve_callable(self):
        curve = SurvivalCurve(TimeGrid(self.cuts), self.values, "linear")
        assert float(curve(0.5)[0]) == pytest.approx(0.75)

    def test_survival_curve_rejects_increasing_values(self):
        with pytest.raises(DataValidationError):
            SurvivalCurve(TimeGrid(self.cuts), np.array([1.0, 0.4, 0.6]))


# ── Normalization and CSV ─────────────────────────────────────────────────────

class TestFeatureScaler:
    def test_zero_variance_column_kept(self):
        x = np.array([[1.0, 3.0], [3.0, 3.0]])
        scaler = FeatureScaler.fit(x)
        np.testing.assert_allclose(scaler.transform(x), [[-1.0, 0.0], [1.0, 0.0]])


class TestCsv:
    def test_roundtrip_is_bitwise(self, tmp_path):
        ds = tag_splits(*split(_random_dataset(n=60, seed=11), seed=0))
        path = write_dataset_csv(ds, tmp_path / "dataset.csv")
        back = read_dataset_csv(path)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.time, ds.time)
        np.testing.assert_array_equal(back.treatment, ds.treatment)
        np.testing.assert_array_equal(back.split, ds.split)

    def test_header(self, tmp_path):
        path = write_dataset_csv(validate_dataset(_rows()), tmp_path / "d.csv", include_split=False)
        assert path.read_text(encoding="utf-8").splitlines()[0] == "x0,x1,t,y,delta"

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset_csv(tmp_path / "nope.csv")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
