"""
报告与估计 MSE 单元测试
"""
import json

import numpy as np
import pandas as pd
import pytest
from freezegun import freeze_time
from pydantic import BaseModel

from errors import ConfigurationError, ReportIOError, ShapeError
from models import CoefficientEstimate
from reporting import (
    ExperimentReport, RepFailure, emit_model, emit_report, estimate_report, estimation_mse,
    estimation_mse_from_summary, load_report, render_table, report_rows, summarize_estimates,
)
from utils import format_duration, format_estimate


def _report(**kwargs) -> ExperimentReport:
    names = ["intercept", "mlv"]
    summaries = {
        "biased": summarize_estimates(names, [[0.8, 0.55], [0.7, 0.56], [0.75, 0.54]], truth=[1.0, 0.5]),
        "ensembleiv:pca": summarize_estimates(
            names, [[1.0, 0.5], [1.02, 0.49]], truth=[1.0, 0.5], failures=[RepFailure(rep=2, reason="boom")],
        ),
    }
    return ExperimentReport(name="demo", seed=42, truth=[1.0, 0.5], estimators=summaries, **kwargs)


@pytest.mark.unit
@pytest.mark.report
class TestEstimationMse:
    """估计 MSE 测试"""

    def test_bias_plus_variance(self):
        """测试 MSE = 偏差平方和 + 方差和"""
        estimates = np.array([[1.0, 0.4], [1.2, 0.6], [0.8, 0.5]])
        expected = (0.0 ** 2 + 0.0 ** 2) + (np.var([1.0, 1.2, 0.8], ddof=1) + np.var([0.4, 0.6, 0.5], ddof=1))

        assert estimation_mse(estimates, [1.0, 0.5]) == pytest.approx(expected)

    def test_pure_bias(self):
        """测试无方差时 MSE 为偏差平方和"""
        assert estimation_mse([[0.9, 0.6], [0.9, 0.6]], [1.0, 0.5]) == pytest.approx(0.02)

    def test_summary_arithmetic(self):
        """测试由均值/标准差复算（已发表表格单元格）"""
        value = estimation_mse_from_summary(
            [0.756, 0.553, 2.000, 1.000], [0.070, 0.014, 0.003, 0.002], [1.0, 0.5, 2.0, 1.0],
        )

        assert value == pytest.approx(0.067, abs=0.002)

    def test_dimension_mismatch(self):
        """测试系数维度不符"""
        with pytest.raises(ShapeError):
            estimation_mse([[1.0, 2.0], [1.0, 2.0]], [1.0])

    def test_needs_two_reps(self):
        """测试少于 2 次重复"""
        with pytest.raises(ConfigurationError):
            estimation_mse([[1.0]], [1.0])


@pytest.mark.unit
@pytest.mark.report
class TestSummaries:
    """汇总测试"""

    def test_summary_fields(self):
        """测试均值、标准差与失败记录"""
        report = _report()
        ens = report.estimators["ensembleiv:pca"]

        assert ens.coef_mean("mlv") == pytest.approx(0.495)
        assert ens.coef_sd("intercept") == pytest.approx(np.std([1.0, 1.02], ddof=1))
        assert ens.n_success == 2
        assert ens.mse == pytest.approx(ens.recompute_mse([1.0, 0.5]))

    def test_empty_summary(self):
        """测试没有成功重复时均值为 NaN 且无 MSE"""
        summary = summarize_estimates(["mlv"], [], truth=[0.5])

        assert np.isnan(summary.mean[0])
        assert summary.mse is None

    def test_report_rows(self):
        """测试 CSV 行为估计量 × 系数"""
        rows = report_rows(_report())

        assert len(rows) == 4
        assert (rows[1]["estimator"], rows[1]["coefficient"], rows[1]["truth"]) == ("biased", "mlv", 0.5)
        assert rows[1]["mean"] == pytest.approx(0.55)
        assert rows[3]["n_failed"] == 1


@pytest.mark.unit
@pytest.mark.report
class TestEmit:
    """报告输出测试"""

    @freeze_time("2026-01-15 09:30:00")
    def test_table_header_and_cells(self):
        """测试文本表格的标题、单元格与 MSE 行"""
        text = render_table(_report(runtime_seconds=3.0))

        assert text.startswith("demo  (seed=42, 2026-01-15 09:30:00, 3.0 s)")
        assert "0.750 (0.050)" in text
        assert "MSE" in text
        assert "failed" in text

    def test_all_formats_written(self, tmp_path):
        """测试三种格式均写出"""
        written = emit_report(_report(curves=[{"sigma": 0.1, "rate": 0.5}]), tmp_path)

        assert sorted(p.name for p in written) == ["demo.csv", "demo.json", "demo.txt", "demo_curves.csv"]
        frame = pd.read_csv(tmp_path / "demo.csv")
        assert list(frame["estimator"].unique()) == ["biased", "ensembleiv:pca"]

    @freeze_time("2026-03-01 12:00:00")
    def test_json_roundtrip(self, tmp_path):
        """测试 JSON 报告可以读回"""
        report = _report(notes=["note"])
        emit_report(report, tmp_path, ["json"])
        loaded = load_report(tmp_path / "demo.json")

        assert loaded.estimators["biased"].mean == report.estimators["biased"].mean
        assert loaded.created_at.isoformat() == "2026-03-01T12:00:00"
        assert loaded.notes == ["note"]

    def test_unknown_format(self, tmp_path):
        """测试未知输出格式"""
        with pytest.raises(ConfigurationError):
            emit_report(_report(), tmp_path, ["xlsx"])

    def test_unwritable_directory(self, tmp_path):
        """测试输出目录不可写"""
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")

        with pytest.raises(ReportIOError) as exc:
            emit_report(_report(), blocker / "sub", ["json"])

        assert exc.value.exit_code == 4

    def test_load_missing(self, tmp_path):
        """测试读取不存在的报告"""
        with pytest.raises(ReportIOError):
            load_report(tmp_path / "none.json")

    def test_estimate_report_uses_se(self):
        """测试单次估计报告以标准误代替跨重复标准差"""
        est = CoefficientEstimate(
            names=["intercept", "mlv"], point=[1.0, 0.5], se=[0.1, 0.02], estimator="ensembleiv",
            se_source="bootstrap",
        )
        report = estimate_report("single", {"ensembleiv": est}, seed=1)

        assert report.estimators["ensembleiv"].sd == [0.1, 0.02]
        assert report.estimators["ensembleiv"].mse is None
        assert report.notes == ["ensembleiv: se_source=bootstrap"]
        assert "NA" in render_table(report)

    def test_emit_model_summary(self, tmp_path):
        """测试任意模型按摘要输出 JSON 与展平表格"""
        class Payload(BaseModel):
            value: float
            series: list[float]

        payload = Payload(value=0.123456, series=list(range(20)))
        emit_model("diag", payload, tmp_path, ["json", "table"], summary={"p": {"value": 0.25}, "series": [1] * 20})

        assert json.loads((tmp_path / "diag.json").read_text(encoding="utf-8")) == {
            "p": {"value": 0.25}, "series": [1] * 20,
        }
        table = (tmp_path / "diag.txt").read_text(encoding="utf-8")
        assert "p.value: 0.2500" in table
        assert "series: [20 项]" in table


@pytest.mark.unit
@pytest.mark.report
class TestFormatting:
    """格式化函数测试"""

    @pytest.mark.parametrize("value,expected", [(0.5534, "0.553"), (None, "NA"), (float("nan"), "NA")])
    def test_format_estimate(self, value, expected):
        """测试估计值格式"""
        assert format_estimate(value) == expected

    @pytest.mark.parametrize("seconds,expected", [(12.34, "12.3 s"), (90, "1.5 min"), (7200, "2.00 h")])
    def test_format_duration(self, seconds, expected):
        """测试耗时格式"""
        assert format_duration(seconds) == expected
