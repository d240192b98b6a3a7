"""
外围特征诊断单元测试
"""
import numpy as np
import pytest
from scipy import stats

from diagnostics import (
    compare_correlations, compute_ts, diagnostic_instruments, diagnostic_residuals, fisher_combine,
    permutation_test, permuted_ts, raw_instrument_sets, relevance_exclusion_summary,
    run_diagnostic, run_diagnostic_kfold,
)
from ensemble_iv import estimate_lambda, transform_instrument, transformed_candidates
from errors import ConfigurationError, ShapeError
from models import RngStream, SampleSet
from simulation import peripheral_spec
from utils import sample_corr


def _instruments(gen, n, residual, leak):
    """两个变换后工具变量；leak 控制误差与残差的相关程度"""
    x = gen.normal(size=n)
    out = []
    for pair in [(0, 1), (1, 0)]:
        xhat = x + gen.normal(0.0, 0.5, size=n)
        z = x + leak * residual + gen.normal(0.0, 0.5, size=n)
        lam = estimate_lambda(xhat, z, x, pair=pair)
        out.append(transform_instrument(lam, xhat, z))
    return x, out


@pytest.mark.unit
@pytest.mark.diagnostics
class TestTestStatistic:
    """TS 与置换检验测试"""

    def test_ts_is_mean_abs_corr(self, gen):
        """测试 TS 为各对 |Corr(Z̃ − X, r)| 的平均"""
        r = gen.normal(size=300)
        x, instruments = _instruments(gen, 300, r, leak=0.3)
        result = compute_ts(instruments, x, r)
        expected = np.mean([abs(sample_corr(inst.values - x, r)) for inst in instruments])

        assert result.ts_observed == pytest.approx(expected)
        assert [(pc.i, pc.j) for pc in result.pair_correlations] == [(0, 1), (1, 0)]
        assert result.permutations == 0

    def test_identity_permutation_gives_observed(self, gen):
        """测试恒等置换的 TS 等于观测值"""
        r = gen.normal(size=200)
        x, instruments = _instruments(gen, 200, r, leak=0.3)

        assert permuted_ts(instruments, x, r, np.arange(200)) == pytest.approx(compute_ts(instruments, x, r).ts_observed)

    def test_strong_leak_rejected(self, gen):
        """测试误差与残差强相关时 p 值取最小值 1/(P+1)"""
        r = gen.normal(size=400)
        x, instruments = _instruments(gen, 400, r, leak=1.0)
        result = permutation_test(instruments, x, r, permutations=200, rng=RngStream(master_seed=3))

        assert result.p_value == pytest.approx(1 / 201)
        assert len(result.permutation_distribution) == 200

    def test_p_value_formula(self, gen):
        """测试 p = (1 + #{置换 TS ≥ 观测}) / (P + 1)"""
        r = gen.normal(size=150)
        x, instruments = _instruments(gen, 150, r, leak=0.0)
        result = permutation_test(instruments, x, r, permutations=300, rng=RngStream(master_seed=4))
        exceed = np.sum(np.array(result.permutation_distribution) >= result.ts_observed)

        assert result.p_value == pytest.approx((1 + exceed) / 301)
        assert 0.0 < result.p_value <= 1.0

    def test_batch_size_does_not_change_result(self, gen):
        """测试批大小不影响置换结果"""
        r = gen.normal(size=120)
        x, instruments = _instruments(gen, 120, r, leak=0.1)
        a = permutation_test(instruments, x, r, permutations=150, rng=RngStream(master_seed=5), batch_size=7)
        b = permutation_test(instruments, x, r, permutations=150, rng=RngStream(master_seed=5), batch_size=150)

        assert a.permutation_distribution == b.permutation_distribution
        assert a.p_value == b.p_value

    def test_null_p_values_roughly_uniform(self):
        """测试零假设下拒绝率接近 α"""
        gen = np.random.default_rng(77)
        p_values = []
        for rep in range(60):
            r = gen.normal(size=100)
            x, instruments = _instruments(gen, 100, r, leak=0.0)
            p_values.append(permutation_test(instruments, x, r, 100, RngStream(master_seed=rep)).p_value)

        assert np.mean(np.array(p_values) < 0.05) <= 0.2

    def test_too_few_permutations(self, gen):
        """测试置换次数少于 100"""
        r = gen.normal(size=50)
        x, instruments = _instruments(gen, 50, r, leak=0.0)

        with pytest.raises(ConfigurationError):
            permutation_test(instruments, x, r, permutations=50)

    def test_zero_permutations_rejected(self, gen):
        """测试显式 permutations=0 报错而不是退回默认置换次数"""
        r = gen.normal(size=50)
        x, instruments = _instruments(gen, 50, r, leak=0.0)

        with pytest.raises(ConfigurationError):
            permutation_test(instruments, x, r, permutations=0)

    def test_zero_batch_size_rejected(self, gen):
        """测试批大小为 0"""
        r = gen.normal(size=50)
        x, instruments = _instruments(gen, 50, r, leak=0.0)

        with pytest.raises(ConfigurationError):
            permutation_test(instruments, x, r, permutations=100, batch_size=0)

    def test_constant_residual(self, gen):
        """测试残差方差为 0"""
        r = gen.normal(size=50)
        x, instruments = _instruments(gen, 50, r, leak=0.0)

        with pytest.raises(ConfigurationError):
            compute_ts(instruments, x, np.ones(50))

    def test_length_mismatch(self, gen):
        """测试 X 与残差长度不一致"""
        r = gen.normal(size=50)
        x, instruments = _instruments(gen, 50, r, leak=0.0)

        with pytest.raises(ShapeError):
            compute_ts(instruments, x[:40], r[:45])

    def test_no_instruments(self, gen):
        """测试没有 (i, j) 对"""
        with pytest.raises(ConfigurationError):
            compute_ts([], gen.normal(size=10), gen.normal(size=10))


@pytest.mark.unit
@pytest.mark.diagnostics
class TestFisherCombine:
    """Fisher 合并测试"""

    def test_single_p_value_unchanged(self):
        """测试单个 p 值合并后不变（χ²(2) 生存函数为 exp(−s/2)）"""
        assert fisher_combine([0.23]) == pytest.approx(0.23)

    def test_matches_scipy(self):
        """测试与 scipy 的 Fisher 方法一致"""
        p = [0.01, 0.2, 0.5, 0.7]

        assert fisher_combine(p) == pytest.approx(stats.combine_pvalues(p, method="fisher").pvalue)

    def test_zero_p_truncated(self):
        """测试 p = 0 截断为 1/(P+1)"""
        assert fisher_combine([0.0], permutations=99) == pytest.approx(0.01)

    def test_invalid_p(self):
        """测试 p 值越界"""
        with pytest.raises(ConfigurationError):
            fisher_combine([0.5, 1.5])
        with pytest.raises(ConfigurationError):
            fisher_combine([])


@pytest.mark.unit
@pytest.mark.diagnostics
class TestRelevanceExclusion:
    """相关性 / 排他性描述统计测试"""

    def test_raw_sets_exclude_self(self, synthetic_predictions):
        """测试变换前候选为其余学习器"""
        _, pred = synthetic_predictions
        sets = raw_instrument_sets(pred)

        assert sorted(sets) == list(range(6))
        assert sets[2].shape == (pred.n, 5)
        np.testing.assert_array_equal(sets[2][:, 2], pred.values[:, 3])

    def test_transform_reduces_exclusion(self, synthetic_predictions):
        """测试变换后排他性相关显著下降"""
        x, pred = synthetic_predictions
        before = relevance_exclusion_summary(pred, x, raw_instrument_sets(pred), "before")
        after_sets = {
            i: np.column_stack([c.values for c in transformed_candidates(i, pred, x, pred)])
            for i in range(pred.n_learners)
        }
        after = relevance_exclusion_summary(pred, x, after_sets, "after")

        assert after.stage == "after"
        assert np.mean(after.exclusion) < 0.01
        assert np.mean(before.exclusion) > 0.1
        assert np.mean(after.relevance) > 0.3

    def test_empty_set_rejected(self, synthetic_predictions):
        """测试空工具变量集合"""
        x, pred = synthetic_predictions

        with pytest.raises(ConfigurationError):
            relevance_exclusion_summary(pred, x, {0: np.zeros((pred.n, 0))}, "after")

    def test_truth_length_checked(self, synthetic_predictions):
        """测试真实 X 长度不符"""
        x, pred = synthetic_predictions

        with pytest.raises(ShapeError):
            relevance_exclusion_summary(pred, x[:10], raw_instrument_sets(pred), "before")


@pytest.mark.unit
@pytest.mark.diagnostics
class TestCompareCorrelations:
    """变换前后比较测试"""

    def test_paired_t(self):
        """测试配对 t 检验与 scipy 一致"""
        before = np.array([0.3, 0.25, 0.4, 0.35])
        after = np.array([0.02, 0.05, 0.01, 0.03])
        comparison = compare_correlations(before, after)

        assert comparison.t_p_value == pytest.approx(stats.ttest_rel(before, after).pvalue)
        assert comparison.before_mean == pytest.approx(0.325)
        assert comparison.after_max == pytest.approx(0.05)

    def test_identical_inputs_skip_t(self):
        """测试前后完全相同时不做 t 检验"""
        comparison = compare_correlations(np.array([0.1, 0.2]), np.array([0.1, 0.2]))

        assert comparison.t_statistic is None


@pytest.mark.unit
@pytest.mark.diagnostics
class TestDiagnosticPipeline:
    """完整诊断流程测试"""

    def test_peripheral_violation_detected(self, peripheral_data):
        """测试 X₂ 误差进入回归误差时诊断拒绝"""
        data = peripheral_data
        fit_pool = SampleSet.concat([data.train, data.test])
        r = diagnostic_residuals(fit_pool, data.holdout, peripheral_spec())
        instruments = transformed_candidates(
            0, data.predictions(data.test), data.test.labels, data.predictions(data.holdout),
        )
        result = permutation_test(instruments, data.holdout.labels, r, 200, RngStream(master_seed=1))

        assert result.p_value < 0.05

    def test_diagnostic_instruments_all_pairs(self, synthetic_predictions):
        """测试诊断使用全部有序对"""
        x, pred = synthetic_predictions
        instruments = diagnostic_instruments(pred, x, pred)

        assert len(instruments) == 6 * 5

    def test_run_diagnostic(self, main_data, second_spec, small_learner):
        """测试预留诊断分区的端到端诊断"""
        pool = main_data.labeled_pool()
        report = run_diagnostic(pool, second_spec, small_learner, RngStream(master_seed=2), 0.2, permutations=200)

        assert report.n_diagnostic == 48
        assert report.n_train + report.n_test + report.n_diagnostic == pool.n
        assert 0.0 < report.result.p_value <= 1.0
        assert report.rejected == (report.result.p_value < report.alpha)
        assert "permutation_distribution" not in report.summary()["result"]

    def test_summary_elides_pairs(self, main_data, second_spec, small_learner):
        """测试配对过多时报告省略逐对相关"""
        report = run_diagnostic(
            main_data.labeled_pool(), second_spec, small_learner, RngStream(master_seed=2), 0.2, permutations=100,
        )
        summary = report.summary(max_pairs=3)

        assert summary["result"]["pair_correlations"] is None
        assert summary["result"]["pair_correlations_elided"] == len(report.result.pair_correlations)

    def test_kfold_combines_p_values(self, main_data, second_spec, small_learner):
        """测试 K 折诊断用 Fisher 方法合并 p 值"""
        report = run_diagnostic_kfold(
            main_data.labeled_pool(), second_spec, small_learner, 2, RngStream(master_seed=3), permutations=100,
        )

        assert len(report.folds) == 2
        assert report.combined_p_value == pytest.approx(fisher_combine([f.result.p_value for f in report.folds]))
