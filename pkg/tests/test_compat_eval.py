"""测试模型兼容性评估：相对准确率、结果表、P@K / F1 与投影误标率"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.bcgan_toolkit import classifiers as clf
from src.bcgan_toolkit import compat_eval as ce
from src.bcgan_toolkit.data_io import ColumnSpec, Dataset, FeatureSchema
from src.bcgan_toolkit.errors import ProjectionUnreliableError

FAST_ROSTER = ["DT (d=10)", "Linear SVM"]


def _fixed_scores(real: Dataset, real_acc: float, gen_acc: float):
    def evaluate(spec, train, test, seed):
        return real_acc if train is real else gen_acc
    return evaluate


def _noise_dataset(x, y) -> Dataset:
    schema = FeatureSchema([ColumnSpec(f"f{i}", "continuous", 0.0, 1.0) for i in range(x.shape[1])],
                           "y", ["0", "1"])
    return Dataset(x, np.asarray(y), schema)


# ---------------------------------------------------------------------------
# 测试 1：单元格格式
# ---------------------------------------------------------------------------

class TestFormatting:

    def test_cell_truncates(self):
        assert ce.format_cell(0.803, 0.803 / 0.836) == "80.3 (96.0)"

    def test_percent_is_truncated_not_rounded(self):
        assert ce.format_percent(0.8369) == "83.6"
        assert ce.format_percent(0.836) == "83.6"

    def test_undefined_relative(self):
        assert ce.format_cell(0.5, None) == "50.0 (n/a)"


# ---------------------------------------------------------------------------
# 测试 2：相对准确率
# ---------------------------------------------------------------------------

class TestRelativeAccuracy:

    def test_identical_data_gives_one(self, toy_train, toy_test):
        report = ce.relative_accuracy(toy_train, toy_train, toy_test, clf.roster(FAST_ROSTER), seed=0)
        assert [r.relative for r in report.results] == [1.0, 1.0]
        assert report.average == 1.0

    def test_ratio_from_evaluate_fn(self, toy_train, toy_test):
        gen = Dataset(toy_train.features[:200], toy_train.labels[:200], toy_train.schema)
        report = ce.relative_accuracy(toy_train, gen, toy_test, clf.roster(FAST_ROSTER),
                                      evaluate_fn=_fixed_scores(toy_train, 0.8, 0.6))
        assert report.result("Linear SVM").relative == pytest.approx(0.75)
        assert report.average == pytest.approx(0.75)

    def test_zero_real_accuracy_excluded(self, toy_train, toy_test, caplog):
        gen = Dataset(toy_train.features[:200], toy_train.labels[:200], toy_train.schema)
        report = ce.relative_accuracy(toy_train, gen, toy_test, clf.roster(FAST_ROSTER),
                                      evaluate_fn=_fixed_scores(toy_train, 0.0, 0.6))
        assert all(r.relative is None for r in report.results)
        assert report.average is None
        assert "无定义" in caplog.text

    def test_empty_roster(self, toy_train, toy_test):
        with pytest.raises(ValueError):
            ce.relative_accuracy(toy_train, toy_train, toy_test, [])

    def test_metadata_kept(self, toy_train, toy_test):
        report = ce.relative_accuracy(toy_train, toy_train, toy_test, clf.roster(["DT (d=10)"]),
                                      evaluate_fn=_fixed_scores(toy_train, 0.9, 0.9), metadata={"method": "x"})
        assert report.metadata == {"method": "x"}


# ---------------------------------------------------------------------------
# 测试 3：报告与结果表
# ---------------------------------------------------------------------------

class TestReport:

    def setup_method(self):
        self.report = ce.CompatReport(
            results=[ce.AlgorithmResult("A", 0.836, 0.803, 0.803 / 0.836),
                     ce.AlgorithmResult("B", 0.5, 0.25, 0.5)],
            average=(0.803 / 0.836 + 0.5) / 2,
            metadata={"seed": 1},
        )

    def test_json_round_trip(self, tmp_path):
        loaded = ce.CompatReport.load_json(self.report.save_json(tmp_path / "r.json"))
        assert loaded == self.report

    def test_wrong_format_tag(self, tmp_path):
        path = tmp_path / "r.json"
        path.write_text('{"format": "other", "results": [], "average": null}', encoding="utf-8")
        with pytest.raises(ValueError):
            ce.CompatReport.load_json(path)

    def test_frame_has_average_row(self):
        frame = self.report.to_frame()
        assert list(frame["algorithm"]) == ["A", "B", "Avg."]
        assert frame.loc[0, "cell"] == "80.3 (96.0)"

    def test_comparison_table(self):
        table = ce.comparison_table({"WGAN": self.report, "BWGAN": self.report})
        assert list(table.columns) == ["REAL", "WGAN", "BWGAN"]
        assert list(table.index) == ["A", "B", "Avg."]
        assert table.loc["A", "REAL"] == "83.6"
        assert table.loc["A", "BWGAN"] == "80.3 (96.0)"

    def test_comparison_table_empty(self):
        with pytest.raises(ValueError):
            ce.comparison_table({})


# ---------------------------------------------------------------------------
# 测试 4：P@K 与 F1
# ---------------------------------------------------------------------------

permutations = st.integers(1, 12).flatmap(
    lambda d: st.tuples(st.permutations(list(range(d))), st.permutations(list(range(d))), st.integers(1, d))
)


class TestInterpretabilityMetrics:

    def test_precision_example(self):
        assert ce.precision_at_k([0, 1, 2, 3, 4, 5], [0, 1, 2, 3, 5, 4], 5) == 0.8

    def test_precision_k_too_large(self):
        with pytest.raises(ValueError):
            ce.precision_at_k([0, 1], [1, 0], 3)

    def test_f1_example(self):
        assert ce.f1_feature_selection({1, 2}, {1, 2, 3}) == pytest.approx(0.8)

    def test_f1_both_empty(self):
        assert ce.f1_feature_selection([], []) == 1.0

    def test_rank_ties_prefer_low_index(self):
        np.testing.assert_array_equal(ce.rank_features([0.2, 0.5, 0.2, 0.1]), [1, 0, 2, 3])

    @settings(max_examples=1000, deadline=None)
    @given(permutations)
    def test_precision_matches_brute_force(self, case):
        a, b, k = case
        brute = sum(1 for i in a[:k] if i in b[:k]) / k
        assert ce.precision_at_k(a, b, k) == brute
        assert 0.0 <= brute <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
    def test_f1_symmetric_and_bounded(self, a, b):
        f1 = ce.f1_feature_selection(a, b)
        assert f1 == ce.f1_feature_selection(b, a)
        assert 0.0 <= f1 <= 1.0
        if a == b:
            assert f1 == 1.0

    def test_report_skips_large_k(self, toy_train, toy_test):
        result = ce.interpretability_report(toy_train, toy_test, seed=0, ks=[1, 2, 3], cs=[0.01])
        assert result["precision_at_k"]["3"] == {"real": None, "generated": None}
        assert 0.0 <= result["precision_at_k"]["1"]["generated"] <= 1.0
        assert set(result["f1_feature_selection"]) == {"0.01"}

    def test_real_baseline_reflects_retraining(self):
        """纯噪声特征上，换种子重训的 REAL 基线不应恒等于 1.0"""
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(400, 40))
        real = _noise_dataset(x, rng.integers(0, 2, size=400))
        result = ce.interpretability_report(real, real, seed=0, ks=[5], cs=[0.1], n_trees=3, max_depth=4)
        assert result["f1_feature_selection"]["0.1"]["real"] < 1.0
        assert result["precision_at_k"]["5"]["real"] < 1.0
        # 生成数据与参考模型使用同一种子和同一份数据时完全一致
        assert result["f1_feature_selection"]["0.1"]["generated"] == 1.0


# ---------------------------------------------------------------------------
# 测试 5：栅格与投影
# ---------------------------------------------------------------------------

class TestGridAndProjection:

    def test_decision_grid_shape(self, toy_train):
        model = clf.train_decision_tree(toy_train, 5)
        grid = ce.decision_grid(model)
        assert grid.shape == (200, 200)
        assert grid.dims == ("x2", "x1")
        assert set(np.unique(grid.values)) <= {0, 1}

    def test_decision_grid_requires_2d(self):
        model = clf.LinearSvmModel(np.ones((3, 2)), np.zeros((1, 2)), 2, 3, c=1.0, penalty="l2")
        with pytest.raises(ValueError):
            ce.decision_grid(model)

    def test_save_grid_csv(self, tmp_path, toy_train):
        grid = ce.decision_grid(clf.train_decision_tree(toy_train, 3), resolution=5)
        lines = ce.save_grid_csv(grid, tmp_path / "grid.csv").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 6
        assert lines[0].startswith("x2,")

    def test_projection_mislabel(self, toy_train, toy_test):
        result = ce.projection_mislabel(toy_train, toy_test, seed=0, hidden=[32], epochs=200,
                                        min_accuracy=0.9, resolution=20)
        assert result.coords.shape == (len(toy_test), 2)
        assert result.grid.shape == (20, 20)
        assert result.mislabel_rate < 0.15

    def test_flipped_labels_are_mislabelled(self, toy_train, toy_test):
        model, _ = ce.train_projection_classifier(toy_train, seed=0, hidden=[32], epochs=200, min_accuracy=0.9)
        flipped = Dataset(toy_test.features, 1 - toy_test.labels, toy_test.schema)
        _, mislabel, _ = ce.project_samples(model, flipped, resolution=10)
        assert mislabel > 0.85

    def test_unreliable_projection(self, toy_train):
        with pytest.raises(ProjectionUnreliableError):
            ce.train_projection_classifier(toy_train, seed=0, hidden=[4], epochs=0, min_accuracy=1.01)
