"""
报告 - 实验结果的汇总、序列化（JSON / CSV / 文本表格）
"""
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader, StrictUndefined
from pydantic import BaseModel, ConfigDict, Field
from pydantic_core import to_json

from errors import ConfigurationError, ReportIOError, ShapeError
from models import CoefficientEstimate
from utils import format_estimate, format_sd

logger = logging.getLogger(__name__)

BASE_DIR = Path(__file__).resolve().parent
TEMPLATES_DIR = Path(os.getenv("TEMPLATES_DIR", str(BASE_DIR / "templates")))

FORMATS = ("json", "csv", "table")


# ==================== 估计误差 ====================
def estimation_mse(estimates: Union[np.ndarray, Sequence[Sequence[float]]], truth: Sequence[float]) -> float:
    """
    估计 MSE = Σⱼ(mean(β̂ⱼ) − βⱼ)² + Σⱼ Var(β̂ⱼ)

    Args:
        estimates: R×p 逐次重复的系数估计
        truth: 长度 p 的真实系数

    Returns:
        float: 偏差平方和 + 方差和（方差用 ddof=1）
    """
    est = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if est.ndim != 2:
        raise ShapeError(f"estimates 需要 R×p 矩阵，实际形状 {est.shape}")
    if est.shape[1] != truth.shape[0]:
        raise ShapeError(f"系数维度 {est.shape[1]} 与真实值维度 {truth.shape[0]} 不一致")
    if est.shape[0] < 2:
        raise ConfigurationError("估计 MSE 至少需要 2 次重复")
    bias2 = float(np.sum((est.mean(axis=0) - truth) ** 2))
    variance = float(np.sum(est.var(axis=0, ddof=1)))
    return bias2 + variance


def estimation_mse_from_summary(
    means: Sequence[float],
    sds: Sequence[float],
    truth: Sequence[float],
) -> float:
    """由均值与标准差表格复算估计 MSE（用于核对已发表的表格）"""
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if not means.shape == sds.shape == truth.shape:
        raise ShapeError("means / sds / truth 维度必须一致")
    return float(np.sum((means - truth) ** 2) + np.sum(sds ** 2))


# ==================== 报告模型 ====================
class RepFailure(BaseModel):
    """一次重复中某个估计量的失败记录"""
    model_config = ConfigDict(frozen=True)

    rep: int
    reason: str


class EstimatorSummary(BaseModel):
    """单个估计量跨重复的汇总"""
    model_config = ConfigDict(frozen=True)

    names: list[str]
    estimates: list[list[float]]
    ses: list[list[float]] = []
    mean: list[float]
    sd: list[float]
    mse: Optional[float] = None
    failures: list[RepFailure] = []

    @property
    def n_success(self) -> int:
        return len(self.estimates)

    def coef_mean(self, name: str) -> float:
        return self.mean[self.names.index(name)]

    def coef_sd(self, name: str) -> float:
        return self.sd[self.names.index(name)]

    def coef_draws(self, name: str) -> np.ndarray:
        return np.asarray(self.estimates, dtype=float)[:, self.names.index(name)]

    def recompute_mse(self, truth: Sequence[float]) -> float:
        """由保存的逐次估计复算 MSE"""
        return estimation_mse(self.estimates, truth)


def summarize_estimates(
    names: list[str],
    estimates: Sequence[Sequence[float]],
    truth: Optional[Sequence[float]] = None,
    ses: Optional[Sequence[Sequence[float]]] = None,
    failures: Optional[Iterable[RepFailure]] = None,
) -> EstimatorSummary:
    """
    汇总逐次估计为均值 / 标准差 / MSE

    Args:
        names: 系数名
        estimates: 成功重复的估计
        truth: 真实系数（给出且成功重复 ≥ 2 时计算 MSE）
        ses: 逐次标准误
        failures: 失败记录
    """
    est = np.asarray(estimates, dtype=float).reshape(-1, len(names))
    if est.shape[0] == 0:
        mean = [float("nan")] * len(names)
        sd = [float("nan")] * len(names)
    else:
        mean = est.mean(axis=0).tolist()
        sd = (est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.zeros(len(names))).tolist()
    mse = None
    if truth is not None and est.shape[0] >= 2:
        mse = estimation_mse(est, truth)
    return EstimatorSummary(
        names=list(names),
        estimates=est.tolist(),
        ses=[list(s) for s in (ses or [])],
        mean=mean,
        sd=sd,
        mse=mse,
        failures=list(failures or []),
    )


class ExperimentReport(BaseModel):
    """
    一次实验的完整报告

    estimators: 估计量键 → 汇总；curves: 曲线/扫描类实验的逐点结果表
    """
    model_config = ConfigDict(frozen=True)

    name: str
    seed: int
    config: dict[str, Any] = {}
    truth: Optional[list[float]] = None
    estimators: dict[str, EstimatorSummary] = {}
    curves: list[dict[str, Any]] = []
    runtime_seconds: float = 0.0
    created_at: datetime = Field(default_factory=datetime.now)
    notes: list[str] = []

    def coefficient_names(self) -> list[str]:
        for summary in self.estimators.values():
            return summary.names
        return []


# ==================== 输出 ====================
def _environment() -> Environment:
    return Environment(
        loader=FileSystemLoader(str(TEMPLATES_DIR)),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )


def report_rows(report: ExperimentReport) -> list[dict[str, Any]]:
    """CSV 行：估计量 × 系数"""
    rows = []
    for key, summary in report.estimators.items():
        for c, name in enumerate(summary.names):
            rows.append({
                "estimator": key,
                "coefficient": name,
                "mean": summary.mean[c],
                "sd": summary.sd[c],
                "truth": None if report.truth is None else report.truth[c],
                "mse": summary.mse,
                "n_success": summary.n_success,
                "n_failed": len(summary.failures),
            })
    return rows


def render_table(report: ExperimentReport) -> str:
    """
    文本表格：系数行 × 估计量列，单元格为 "均值 (标准差)"，末行为估计 MSE
    """
    keys = list(report.estimators)
    names = report.coefficient_names()
    header = ["coefficient"] + (["truth"] if report.truth is not None else []) + keys
    body = []
    for c, name in enumerate(names):
        row = [name]
        if report.truth is not None:
            row.append(format_estimate(report.truth[c]))
        for key in keys:
            s = report.estimators[key]
            row.append(f"{format_estimate(s.mean[c])} {format_sd(s.sd[c])}")
        body.append(row)
    if keys:
        tail = ["MSE"] + ([""] if report.truth is not None else [])
        body.append(tail + [format_estimate(report.estimators[k].mse) for k in keys])
        tail = ["failed"] + ([""] if report.truth is not None else [])
        body.append(tail + [str(len(report.estimators[k].failures)) for k in keys])

    curve_columns = list(report.curves[0]) if report.curves else []
    curve_rows = [
        [format_estimate(v) if isinstance(v, float) else str(v) for v in (row.get(c) for c in curve_columns)]
        for row in report.curves
    ]
    return _environment().get_template("report_table.txt.j2").render(
        report=report,
        widths=_widths([header] + body),
        header=header,
        rows=body,
        curve_columns=curve_columns,
        curve_widths=_widths([curve_columns] + curve_rows) if curve_columns else [],
        curve_rows=curve_rows,
    )


def _widths(rows: list[list[str]]) -> list[int]:
    if not rows:
        return []
    return [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportIOError(str(path), e) from e
    return path


def _check_formats(formats: Sequence[str]) -> list[str]:
    formats = list(formats)
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ConfigurationError(f"未知的输出格式: {unknown}，可选 {FORMATS}")
    return formats


def emit_report(
    report: ExperimentReport,
    out_dir: Union[str, Path],
    formats: Sequence[str] = FORMATS,
) -> list[Path]:
    """
    输出实验报告

    Args:
        report: 实验报告
        out_dir: 输出目录
        formats: json / csv / table 的任意组合

    Returns:
        list[Path]: 写出的文件
    """
    out_dir = Path(out_dir)
    written = []
    for fmt in _check_formats(formats):
        if fmt == "json":
            written.append(_write(out_dir / f"{report.name}.json", report.model_dump_json(indent=2)))
        elif fmt == "csv":
            frame = pd.DataFrame(report_rows(report), columns=[
                "estimator", "coefficient", "mean", "sd", "truth", "mse", "n_success", "n_failed",
            ])
            written.append(_write(out_dir / f"{report.name}.csv", frame.to_csv(index=False)))
            if report.curves:
                curves = pd.DataFrame(report.curves).to_csv(index=False)
                written.append(_write(out_dir / f"{report.name}_curves.csv", curves))
        else:
            written.append(_write(out_dir / f"{report.name}.txt", render_table(report)))
    logger.info(f"📝 报告已写入 {out_dir}: {[p.name for p in written]}")
    return written


def load_report(path: Union[str, Path]) -> ExperimentReport:
    """读取 JSON 报告"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ReportIOError(str(path), e) from e
    return ExperimentReport.model_validate_json(text)


def estimate_report(
    name: str,
    estimates: dict[str, CoefficientEstimate],
    seed: int,
    config: Optional[dict[str, Any]] = None,
    runtime_seconds: float = 0.0,
) -> ExperimentReport:
    """
    把单次估计（CLI estimate / benchmark）包装成报告

    单次估计没有跨重复的标准差，表格中的括号项为估计量自带的标准误。
    """
    summaries = {
        key: EstimatorSummary(
            names=est.names,
            estimates=[est.point],
            ses=[est.se],
            mean=est.point,
            sd=est.se,
        )
        for key, est in estimates.items()
    }
    return ExperimentReport(
        name=name,
        seed=seed,
        config=config or {},
        estimators=summaries,
        runtime_seconds=runtime_seconds,
        notes=[f"{key}: se_source={est.se_source}" for key, est in estimates.items()],
    )


def emit_model(
    name: str,
    payload: BaseModel,
    out_dir: Union[str, Path],
    formats: Sequence[str] = ("json",),
    rows: Optional[list[dict[str, Any]]] = None,
    summary: Optional[dict[str, Any]] = None,
) -> list[Path]:
    """
    输出任意 pydantic 结果（诊断报告等）

    Args:
        name: 文件名前缀
        payload: 结果模型
        out_dir: 输出目录
        formats: json / csv / table
        rows: csv 行；缺省不写 csv
        summary: 代替完整模型写入 JSON 与表格的摘要字典
    """
    out_dir = Path(out_dir)
    written = []
    data = summary if summary is not None else payload.model_dump(mode="json")
    for fmt in _check_formats(formats):
        if fmt == "json":
            text = payload.model_dump_json(indent=2) if summary is None else to_json(data, indent=2).decode()
            written.append(_write(out_dir / f"{name}.json", text))
        elif fmt == "csv" and rows is not None:
            written.append(_write(out_dir / f"{name}.csv", pd.DataFrame(rows).to_csv(index=False)))
        elif fmt == "table":
            lines = [f"{k}: {v}" for k, v in _flatten(data)]
            written.append(_write(out_dir / f"{name}.txt", "\n".join(lines) + "\n"))
    return written


def _flatten(data: Any, prefix: str = "") -> list[tuple[str, Any]]:
    """嵌套字典展平为 (a.b.c, 值)；长列表只显示长度"""
    if isinstance(data, dict):
        out = []
        for k, v in data.items():
            out.extend(_flatten(v, f"{prefix}{k}."))
        return out
    if isinstance(data, list) and len(data) > 10:
        return [(prefix.rstrip("."), f"[{len(data)} 项]")]
    if isinstance(data, float):
        return [(prefix.rstrip("."), format_estimate(data, 4))]
    return [(prefix.rstrip("."), data)]
