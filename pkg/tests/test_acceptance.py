"""
验收套件测试
"""
import json
import logging

import pytest

from acceptance import (
    AcceptanceResult, AcceptanceRun, AcceptanceScale, check_engine_oracles, check_exclusion_identity,
    check_lambda_convergence, check_table_arithmetic, load_published_tables, run_acceptance,
)
from errors import ConfigurationError
from models import RngStream


@pytest.mark.unit
@pytest.mark.simulation
class TestExactCriteria:
    """精确 / 近似精确的验收项"""

    def test_exclusion_identity(self):
        """测试同一样本上变换后的协方差为 0"""
        result = check_exclusion_identity(RngStream(master_seed=1), cases=20)

        assert result.passed
        assert result.details["max_scaled_cov"] < 1e-10

    def test_published_tables_consistent(self):
        """测试已发表表格的 MSE 与均值/标准差一致"""
        result = check_table_arithmetic()

        assert result.passed, result.details["misses"]
        assert result.details["cells"] == sum(len(cols) for cols in load_published_tables()["tables"].values())

    def test_table_arithmetic_detects_typo(self, tmp_path):
        """测试 MSE 单元格错误被发现"""
        payload = {
            "truth": [1.0, 0.5],
            "tables": {"t": [{"column": "bad", "means": [1.0, 0.6], "sds": [0.0, 0.0], "mse": 0.5}]},
        }
        path = tmp_path / "tables.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        result = check_table_arithmetic(path)

        assert not result.passed
        assert result.details["misses"] == ["t/bad: 0.0100 vs 0.5"]

    def test_engine_oracles(self):
        """测试 2SLS、梯度、LASSO 与 bootstrap 四项引擎检查"""
        result = check_engine_oracles(RngStream(master_seed=2), bootstrap_replicates=100)

        assert result.details["2sls_ols_gap"] < 1e-10
        assert result.details["gradient_gap"] < 1e-6
        assert result.details["lasso_gap"] < 1e-5
        assert result.passed

    def test_lambda_convergence(self):
        """测试固定集成下 mean|λ̂ₙ − λ̂_ref| 随样本量单调下降，参照样本 8000·4 条"""
        result = check_lambda_convergence(AcceptanceScale.quick(), RngStream(master_seed=3))
        errors = result.details["mean_abs_error"]

        assert result.passed, errors
        assert result.details["sizes"] == [500, 2000, 8000]
        assert result.details["n_ref"] == 32000
        assert errors[0] > errors[1] > errors[2] > 0


@pytest.mark.unit
@pytest.mark.simulation
class TestRunner:
    """验收运行器测试"""

    def test_invalid_criterion(self):
        """测试编号越界"""
        with pytest.raises(ConfigurationError):
            run_acceptance(RngStream(master_seed=1), criteria=[0, 3])

    def test_selected_criteria_only(self):
        """测试只运行指定编号并按编号排序"""
        results = run_acceptance(RngStream(master_seed=4), criteria=[2, 1], quick=True)

        assert [r.criterion for r in results] == [1, 2]
        assert all(r.runtime_seconds >= 0 for r in results)

    def test_run_summary(self):
        """测试汇总行与 all_passed"""
        results = run_acceptance(RngStream(master_seed=4), criteria=[1], quick=True)
        run = AcceptanceRun(seed=4, quick=True, results=results)

        assert run.all_passed
        assert run.rows()[0]["name"] == "exclusion_identity"

    def test_shared_criteria_stamped_and_logged(self, mocker, caplog):
        """测试共用一次实验的 3、4 项同样记录耗时并输出通过情况"""
        shared = [
            AcceptanceResult(criterion=3, name="bias_correction", passed=True),
            AcceptanceResult(criterion=4, name="efficiency", passed=False),
        ]
        fake = mocker.patch("acceptance.check_bias_and_efficiency", return_value=shared)
        clock = mocker.patch("acceptance.time")
        clock.perf_counter.side_effect = [10.0, 12.5]

        with caplog.at_level(logging.INFO, logger="acceptance"):
            results = run_acceptance(RngStream(master_seed=1), criteria=[4, 3], quick=True)

        fake.assert_called_once()
        assert [(r.criterion, r.runtime_seconds) for r in results] == [(3, 2.5), (4, 2.5)]
        assert "✅ 验收 3 (bias_correction): 2.5 s" in caplog.text
        assert "❌ 验收 4 (efficiency): 2.5 s" in caplog.text

    def test_quick_scale_smaller(self):
        """测试 quick 规模小于完整规模"""
        quick, full = AcceptanceScale.quick(), AcceptanceScale()

        assert quick.reps < full.reps
        assert 0.02 in quick.power_sigmas and 0.4 in quick.power_sigmas


@pytest.mark.slow
@pytest.mark.simulation
class TestQuickSuite:
    """quick 规模的完整验收（耗时较长）"""

    def test_quick_suite_runs(self):
        """测试全部十项在 quick 规模下都能产出结果"""
        results = run_acceptance(RngStream(master_seed=2024), quick=True)

        assert [r.criterion for r in results] == list(range(1, 11))
        assert {r.criterion for r in results if r.passed} >= {1, 2, 9, 10}
