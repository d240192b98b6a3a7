"""
基准估计量单元测试
"""
import numpy as np
import pytest

from benchmarks import (
    calibration_design, fit_biased, fit_unbiased, regression_calibration, run_benchmark,
    subset_tree_ensembleiv, subset_tree_predictions,
)
from ensemble import LearnerConfig, predict_aggregate, train_ensemble, tree_outputs
from ensemble_iv import plan_crossfit
from errors import ConfigurationError
from models import BenchmarkConfig, RngStream, SelectionConfig
from regression import fit_ols


@pytest.mark.unit
@pytest.mark.benchmarks
class TestBaselines:
    """Biased / Unbiased 测试"""

    def test_unbiased_uses_true_labels(self, main_data, second_spec):
        """测试 unbiased 在有标签样本池上用真实 X 回归"""
        pool = main_data.labeled_pool()
        estimate = fit_unbiased(pool, second_spec)

        assert estimate.estimator == "unbiased"
        assert estimate.names == ["intercept", "mlv", "w1", "w2"]
        assert estimate.coef("mlv") == pytest.approx(0.5, abs=0.4)

    def test_biased_uses_aggregate(self, main_data, main_model, second_spec):
        """测试 biased 用聚合预测作为 MLV"""
        estimate = fit_biased(main_model, main_data.d_unlabel, second_spec)
        xhat = predict_aggregate(main_model, main_data.d_unlabel)
        design_values = np.column_stack([np.ones_like(xhat), xhat, main_data.d_unlabel.controls])
        expected, *_ = np.linalg.lstsq(design_values, main_data.d_unlabel.outcomes, rcond=None)

        assert estimate.estimator == "biased"
        np.testing.assert_allclose(estimate.point_array(), expected, atol=1e-8)


@pytest.mark.unit
@pytest.mark.benchmarks
class TestRegressionCalibration:
    """回归校准测试"""

    def test_calibration_design_columns(self, gen):
        """测试校准设计矩阵为 [1, X̂, W]"""
        design = calibration_design(gen.normal(size=20), gen.normal(size=(20, 2)), ["w1", "w2"])

        assert design.names == ["intercept", "xhat", "w1", "w2"]

    def test_calibration_matches_two_step(self, main_data, main_model, second_spec):
        """测试与手工两步计算一致"""
        estimate = regression_calibration(main_model, main_data.d_test, main_data.d_unlabel, second_spec)
        d_test, d_unlabel = main_data.d_test, main_data.d_unlabel
        calib = fit_ols(
            calibration_design(predict_aggregate(main_model, d_test), d_test.controls, ["w1", "w2"]), d_test.labels,
        )
        calibrated = calib.predict(
            calibration_design(predict_aggregate(main_model, d_unlabel), d_unlabel.controls, ["w1", "w2"])
        )
        values = np.column_stack([np.ones_like(calibrated), calibrated, d_unlabel.controls])
        expected, *_ = np.linalg.lstsq(values, d_unlabel.outcomes, rcond=None)

        assert estimate.estimator == "regcal"
        np.testing.assert_allclose(estimate.point_array(), expected, atol=1e-8)
        assert estimate.diagnostics["calibration_names"] == ["intercept", "xhat", "w1", "w2"]

    def test_requires_model_and_test(self, main_data, second_spec):
        """测试非交叉拟合缺少模型"""
        with pytest.raises(ConfigurationError):
            regression_calibration(None, None, main_data.d_unlabel, second_spec)

    def test_crossfit_with_shared_plan(self, main_data, second_spec, small_learner):
        """测试交叉拟合使用共享计划并对各折取平均"""
        pool = main_data.labeled_pool()
        plan = plan_crossfit(pool, 3, small_learner, RngStream(master_seed=21))
        estimate = regression_calibration(None, None, main_data.d_unlabel, second_spec, crossfit=True, plan=plan)
        folds = [
            regression_calibration(fold.model, fold.test, main_data.d_unlabel, second_spec).point for fold in plan
        ]

        assert estimate.estimator == "regcal_cf"
        np.testing.assert_allclose(estimate.point, np.mean(folds, axis=0))

    def test_crossfit_needs_plan_or_inputs(self, main_data, second_spec):
        """测试交叉拟合缺少 plan 与训练输入"""
        with pytest.raises(ConfigurationError):
            regression_calibration(None, None, main_data.d_unlabel, second_spec, crossfit=True)


@pytest.mark.unit
@pytest.mark.benchmarks
class TestSubsetTrees:
    """树子集模式测试"""

    def test_full_subset_equals_aggregate(self, main_data, main_model):
        """测试 subset_size = M 时每列等于聚合预测"""
        matrix = subset_tree_predictions(main_model, 8, 3, main_data.d_test, RngStream(master_seed=1))

        for c in range(3):
            np.testing.assert_allclose(matrix.values[:, c], predict_aggregate(main_model, main_data.d_test))

    def test_single_tree_subsets(self, main_data, main_model):
        """测试 subset_size = 1 时每列是某一棵树的预测"""
        matrix = subset_tree_predictions(main_model, 1, 5, main_data.d_test, RngStream(master_seed=1))
        outputs = tree_outputs(main_model, main_data.d_test)

        assert matrix.learner_kind == "subset"
        for c in range(5):
            assert any(np.allclose(matrix.values[:, c], outputs[:, t]) for t in range(main_model.n_learners))

    def test_same_rng_same_subsets(self, main_data, main_model):
        """测试 D_test 与 D_unlabel 用同一 rng 时子集一致"""
        rng = RngStream(master_seed=4)
        a = subset_tree_predictions(main_model, 3, 4, main_data.d_test, rng)
        b = subset_tree_predictions(main_model, 3, 4, main_data.d_test, rng, n_jobs=2)

        np.testing.assert_array_equal(a.values, b.values)

    def test_subset_too_large(self, main_data, main_model):
        """测试 subset_size > M"""
        with pytest.raises(ConfigurationError):
            subset_tree_predictions(main_model, 9, 3, main_data.d_test, RngStream(master_seed=1))

    def test_boosting_rejected(self, main_data):
        """测试 boosting 模型不支持树子集"""
        model = train_ensemble(
            main_data.d_train, LearnerConfig(technique="boosting", n_learners=4, max_depth=2), RngStream(master_seed=1),
        )
        with pytest.raises(ConfigurationError):
            subset_tree_predictions(model, 2, 3, main_data.d_test, RngStream(master_seed=1))

    def test_subset_ensembleiv_tagged(self, main_data, main_model, second_spec):
        """测试树子集 EnsembleIV 的估计量标签"""
        estimate = subset_tree_ensembleiv(
            main_data, main_model, second_spec, 4, 6, RngStream(master_seed=2), SelectionConfig(method="top_n", n=2),
        )

        assert estimate.estimator == "subset_trees"
        assert estimate.diagnostics["subset_draws"] == 6
        assert np.all(np.isfinite(estimate.point))


@pytest.mark.unit
@pytest.mark.benchmarks
class TestRunBenchmark:
    """统一入口测试"""

    @pytest.mark.parametrize("estimator", ["biased", "unbiased", "regcal"])
    def test_dispatch(self, estimator, main_data, main_model, second_spec):
        """测试按配置分派"""
        estimate = run_benchmark(
            BenchmarkConfig(estimator=estimator), main_data, main_model, second_spec, RngStream(master_seed=1),
        )

        assert estimate.estimator == estimator

    def test_regcal_cf_dispatch(self, main_data, main_model, second_spec, small_learner):
        """测试交叉拟合回归校准分派"""
        estimate = run_benchmark(
            BenchmarkConfig(estimator="regcal_cf"), main_data, main_model, second_spec, RngStream(master_seed=1),
            k=2, learner_config=small_learner,
        )

        assert estimate.diagnostics["folds"] == 2

    def test_subset_size_must_be_below_m(self, main_data, main_model, second_spec):
        """测试基准模式要求 subset_size < M"""
        with pytest.raises(ConfigurationError):
            run_benchmark(
                BenchmarkConfig(estimator="subset_trees", subset_size=8), main_data, main_model, second_spec,
                RngStream(master_seed=1),
            )

    def test_config_requires_subset_size(self):
        """测试 subset_trees 必须给出 subset_size"""
        with pytest.raises(ConfigurationError):
            BenchmarkConfig(estimator="subset_trees")

    def test_n_learners_mismatch(self, main_data, main_model, second_spec):
        """测试配置的 M 与模型不一致"""
        with pytest.raises(ConfigurationError):
            run_benchmark(
                BenchmarkConfig(estimator="biased", n_learners=50), main_data, main_model, second_spec,
                RngStream(master_seed=1),
            )
