"""
验收套件 - 十项验收标准

每项返回 AcceptanceResult（是否通过 + 关键数值）。quick=True 时缩小重复次数和样本量，
只用于冒烟检查，结论不等同于完整规模。
"""
import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from benchmarks import fit_unbiased
from ensemble import LearnerConfig
from ensemble_iv import estimate_lambda, lasso_objective, lasso_solve, transform_instrument
from errors import ConfigurationError
from models import CoefficientEstimate, DesignMatrix, PartitionedDataset, RngStream
from regression import bootstrap_estimates, fit_2sls, fit_ols, log_likelihood, log_likelihood_gradient
from reporting import ExperimentReport, estimation_mse_from_summary
from simulation import (
    ExperimentSpec, MainDgpConfig, extension_curve, generate_main_dgp,
    lambda_convergence, main_spec, power_curve, run_monte_carlo,
)
from utils import sample_cov, sample_sd

logger = logging.getLogger(__name__)

BASE_DIR = Path(__file__).resolve().parent
DATA_DIR = Path(os.getenv("DATA_DIR", str(BASE_DIR / "data")))
PUBLISHED_TABLES = DATA_DIR / "published_tables.json"


class AcceptanceResult(BaseModel):
    """单项验收结果"""
    model_config = ConfigDict(frozen=True)

    criterion: int = Field(ge=1, le=10)
    name: str
    passed: bool
    details: dict[str, Any] = {}
    runtime_seconds: float = 0.0


class AcceptanceRun(BaseModel):
    """一次验收运行的汇总"""
    seed: int
    quick: bool
    results: list[AcceptanceResult]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"criterion": r.criterion, "name": r.name, "passed": r.passed, "runtime_seconds": r.runtime_seconds}
            for r in self.results
        ]


class AcceptanceScale(BaseModel):
    """验收规模参数"""
    model_config = ConfigDict(frozen=True)

    reps: int = 50
    n_learners: int = 100
    n_label: int = 1500
    n_unlabel: int = 7000
    peripheral_reps: int = 100
    permutations: int = 1000
    power_sigmas: tuple[float, ...] = tuple(round(0.02 * k, 2) for k in range(1, 21))
    extension_sigmas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    convergence_reps: int = 50
    bootstrap_replicates: int = 200

    @classmethod
    def quick(cls) -> "AcceptanceScale":
        return cls(
            reps=4, n_learners=10, n_label=400, n_unlabel=1200,
            peripheral_reps=20, permutations=200,
            power_sigmas=(0.02, 0.4), extension_sigmas=(0.1, 0.4),
            convergence_reps=20, bootstrap_replicates=50,
        )


# ==================== 1 / 2 / 9 / 10：精确或近似精确检查 ====================
def check_exclusion_identity(rng: RngStream, cases: int = 100, n: int = 200) -> AcceptanceResult:
    """同一样本上估计 λ 并变换后，Cov(Z̃, e) 在数值误差内为 0"""
    worst = 0.0
    for c in range(cases):
        gen = rng.child(c).generator()
        x = gen.normal(size=n)
        shared = gen.normal(size=n)
        xhat = x + gen.uniform(0.1, 1.0) * shared + gen.normal(0.0, 0.5, size=n)
        z = x + gen.uniform(-1.0, 1.0) * shared + gen.normal(0.0, 0.5, size=n)
        lam = estimate_lambda(xhat, z, x)
        z_tilde = transform_instrument(lam, xhat, z).values
        e = xhat - x
        ratio = abs(sample_cov(z_tilde, e)) / (sample_sd(z_tilde) * sample_sd(e))
        worst = max(worst, ratio)
    return AcceptanceResult(
        criterion=1, name="exclusion_identity",
        passed=worst < 1e-10, details={"cases": cases, "n": n, "max_scaled_cov": worst},
    )


def load_published_tables(path: Optional[Path] = None) -> dict[str, Any]:
    """读取已发表表格的均值 / 标准差 / MSE"""
    path = path or PUBLISHED_TABLES
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def check_table_arithmetic(path: Optional[Path] = None, tolerance: float = 0.002) -> AcceptanceResult:
    """由已发表的均值和标准差复算每个估计 MSE 单元格"""
    payload = load_published_tables(path)
    truth = payload["truth"]
    worst, cells, misses = 0.0, 0, []
    for table, columns in payload["tables"].items():
        for col in columns:
            value = estimation_mse_from_summary(col["means"], col["sds"], truth)
            dev = abs(value - col["mse"])
            cells += 1
            worst = max(worst, dev)
            if dev > tolerance:
                misses.append(f"{table}/{col['column']}: {value:.4f} vs {col['mse']}")
    return AcceptanceResult(
        criterion=2, name="table_arithmetic",
        passed=not misses, details={"cells": cells, "max_deviation": worst, "misses": misses},
    )


def check_engine_oracles(rng: RngStream, bootstrap_replicates: int = 200) -> AcceptanceResult:
    """2SLS=OLS、logistic 梯度、LASSO 网格、bootstrap 标准误四项引擎检查"""
    details: dict[str, Any] = {}
    gen = rng.child(0).generator()

    # 工具变量等于内生变量时 2SLS 与 OLS 一致
    n = 300
    x = gen.normal(size=n)
    w = gen.normal(size=(n, 2))
    y = 1.0 + 0.5 * x + w @ np.array([2.0, 1.0]) + gen.normal(size=n)
    iv = fit_2sls(y, x, x.reshape(-1, 1), controls=w, control_names=["w1", "w2"])
    ols = fit_ols(DesignMatrix.build([("mlv", x), ("w1", w[:, 0]), ("w2", w[:, 1])]), y)
    details["2sls_ols_gap"] = float(np.max(np.abs(iv.point_array() - ols.point_array())))

    # logistic 解析梯度 vs 中心差分
    values = np.column_stack([np.ones(200), gen.normal(size=(200, 2))])
    labels = (gen.uniform(size=200) < 0.4).astype(float)
    beta = gen.normal(0.0, 0.5, size=3)
    h = 1e-5
    numeric = np.array([
        (log_likelihood(beta + h * np.eye(3)[k], values, labels)
         - log_likelihood(beta - h * np.eye(3)[k], values, labels)) / (2 * h)
        for k in range(3)
    ])
    analytic = log_likelihood_gradient(beta, values, labels)
    details["gradient_gap"] = float(np.max(np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))))

    # 两个预测变量的 LASSO vs 网格最优
    X = gen.normal(size=(150, 2))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    target = X @ np.array([0.8, -0.3]) + gen.normal(0.0, 0.5, size=150)
    delta = 0.2
    gamma = lasso_solve(target, X, delta)
    details["lasso_gap"] = lasso_objective(target, X, gamma, delta) - _grid_minimum(target, X, delta)

    # bootstrap 标准误 vs OLS 解析标准误
    dgp = MainDgpConfig(n_label=1000, n_unlabel=1500)
    data = generate_main_dgp(dgp, rng.child(1))
    spec = main_spec(dgp)

    def unbiased(d: PartitionedDataset, _: RngStream) -> CoefficientEstimate:
        return fit_unbiased(d.labeled_pool(), spec)

    boot = bootstrap_estimates(unbiased, data, bootstrap_replicates, rng.child(2))
    analytic_se = unbiased(data, rng).std_err("mlv")
    details["bootstrap_se_ratio"] = boot.std_err("mlv") / analytic_se

    passed = (
        details["2sls_ols_gap"] < 1e-10
        and details["gradient_gap"] < 1e-6
        and details["lasso_gap"] < 1e-5
        and 0.8 <= details["bootstrap_se_ratio"] <= 1.2
    )
    return AcceptanceResult(criterion=9, name="engine_oracles", passed=passed, details=details)


def _grid_minimum(y: np.ndarray, X: np.ndarray, delta: float) -> float:
    """粗网格 + 两轮局部细化的二维目标函数最小值"""
    center, half = np.zeros(2), 2.0
    best = np.inf
    for _ in range(3):
        grid = np.linspace(-half, half, 401)
        g0, g1 = np.meshgrid(center[0] + grid, center[1] + grid, indexing="ij")
        gammas = np.column_stack([g0.ravel(), g1.ravel()])
        resid = y[:, None] - X @ gammas.T
        objective = (resid ** 2).mean(axis=0) + delta * np.abs(gammas).sum(axis=1)
        k = int(np.argmin(objective))
        best, center = float(objective[k]), gammas[k]
        half = half / 100.0
    return best


def check_lambda_convergence(
    scale: AcceptanceScale,
    rng: RngStream,
    n_jobs: Optional[int] = 1,
    sizes: Sequence[int] = (500, 2000, 8000),
) -> AcceptanceResult:
    """固定一个训练好的集成，mean|λ̂ₙ − λ̂_ref| 随 n 单调下降（参照样本 8000·4 条）"""
    dgp = MainDgpConfig(n_label=scale.n_label, n_unlabel=scale.n_unlabel)
    learner = LearnerConfig(task=dgp.task, n_learners=scale.n_learners)
    report = lambda_convergence(rng, sizes, scale.convergence_reps, dgp=dgp, learner=learner, n_jobs=n_jobs)
    errors = [row["mean_abs_error"] for row in report.curves]
    return AcceptanceResult(
        criterion=10, name="lambda_convergence",
        passed=all(a > b for a, b in zip(errors, errors[1:])),
        details={
            "sizes": list(sizes), "mean_abs_error": errors,
            "lambda_ref": report.curves[0]["lambda_ref"], "n_ref": report.config["n_ref"],
        },
    )


# ==================== 3-6：蒙特卡洛排序 ====================
def _main_experiment(
    scale: AcceptanceScale,
    rng: RngStream,
    n_jobs: Optional[int],
    name: str,
    estimators: Sequence[str],
    mlv_family: str = "continuous",
    second_phase: str = "linear",
    technique: str = "bagging",
) -> ExperimentReport:
    dgp = MainDgpConfig(
        mlv_family=mlv_family, second_phase=second_phase,
        n_label=scale.n_label, n_unlabel=scale.n_unlabel,
    )
    learner = LearnerConfig(
        technique=technique, task=dgp.task, n_learners=scale.n_learners,
    )
    spec = ExperimentSpec(
        name=name, dgp=dgp, learner=learner, estimators=list(estimators), reps=scale.reps,
    )
    return run_monte_carlo(spec, rng, n_jobs=n_jobs)


def check_bias_and_efficiency(
    scale: AcceptanceScale,
    rng: RngStream,
    n_jobs: Optional[int] = 1,
) -> list[AcceptanceResult]:
    """连续 MLV + 线性第二阶段：偏差修正排序（3）与效率排序（4）共用一次实验"""
    report = _main_experiment(scale, rng, n_jobs, "acceptance_linear", ["biased", "unbiased", "ensembleiv:pca"])
    biased, unbiased, ens = (report.estimators[k] for k in ("biased", "unbiased", "ensembleiv:pca"))
    bias_ens = abs(ens.coef_mean("mlv") - 0.5)
    bias_biased = abs(biased.coef_mean("mlv") - 0.5)
    third = AcceptanceResult(
        criterion=3, name="bias_correction",
        passed=bias_ens < bias_biased and ens.mse < biased.mse,
        details={"ensembleiv_mlv": ens.coef_mean("mlv"), "biased_mlv": biased.coef_mean("mlv"),
                 "ensembleiv_mse": ens.mse, "biased_mse": biased.mse},
    )
    fourth = AcceptanceResult(
        criterion=4, name="efficiency",
        passed=ens.coef_sd("mlv") < unbiased.coef_sd("mlv"),
        details={"ensembleiv_sd": ens.coef_sd("mlv"), "unbiased_sd": unbiased.coef_sd("mlv")},
    )
    return [third, fourth]


def check_logistic_pathway(scale: AcceptanceScale, rng: RngStream, n_jobs: Optional[int] = 1) -> AcceptanceResult:
    """二值 MLV + logistic 第二阶段（2SRI）"""
    report = _main_experiment(
        scale, rng, n_jobs, "acceptance_logistic", ["biased", "ensembleiv:pca"],
        mlv_family="binary", second_phase="logistic",
    )
    biased, ens = report.estimators["biased"], report.estimators["ensembleiv:pca"]
    bias_ens = abs(ens.coef_mean("mlv") - 0.5)
    bias_biased = abs(biased.coef_mean("mlv") - 0.5)
    return AcceptanceResult(
        criterion=5, name="logistic_pathway",
        passed=bias_ens < bias_biased and not ens.failures,
        details={"ensembleiv_mlv": ens.coef_mean("mlv"), "biased_mlv": biased.coef_mean("mlv"),
                 "ensembleiv_failures": len(ens.failures)},
    )


def check_boosting_pathway(scale: AcceptanceScale, rng: RngStream, n_jobs: Optional[int] = 1) -> AcceptanceResult:
    """boosting 累积学习器 + 线性第二阶段"""
    report = _main_experiment(
        scale, rng, n_jobs, "acceptance_boosting", ["biased", "ensembleiv:pca"], technique="boosting",
    )
    biased, ens = report.estimators["biased"], report.estimators["ensembleiv:pca"]
    return AcceptanceResult(
        criterion=6, name="boosting_pathway",
        passed=ens.mse <= biased.mse or abs(ens.mse - biased.mse) <= 0.002,
        details={"ensembleiv_mse": ens.mse, "biased_mse": biased.mse},
    )


# ==================== 7 / 8：外围特征 ====================
def check_diagnostic_power(scale: AcceptanceScale, rng: RngStream, n_jobs: Optional[int] = 1) -> AcceptanceResult:
    """σ=0.02 拒绝率 ≤ 0.10，σ=0.40 拒绝率 ≥ 0.90，且每个 σ 变换后相关性显著下降"""
    report = power_curve(
        scale.power_sigmas, rng, reps=scale.peripheral_reps, permutations=scale.permutations, n_jobs=n_jobs,
    )
    by_sigma = {round(row["sigma"], 2): row for row in report.curves}
    low, high = by_sigma.get(0.02), by_sigma.get(0.4)
    reduced = all(
        row["mean_corr_after"] < row["mean_corr_before"]
        and row["paired_t_p"] is not None and row["paired_t_p"] < 0.01
        for row in report.curves
    )
    passed = (
        low is not None and high is not None
        and low["rejection_rate"] <= 0.10 and high["rejection_rate"] >= 0.90 and reduced
    )
    return AcceptanceResult(
        criterion=7, name="diagnostic_power", passed=passed,
        details={"curve": report.curves, "correlation_reduced_everywhere": reduced},
    )


def check_extended_estimator(scale: AcceptanceScale, rng: RngStream, n_jobs: Optional[int] = 1) -> AcceptanceResult:
    """修正 λ 估计在每个 σ 都在 1.0 ± 0.05 内，而标准估计在 σ=0.4 偏离超过 0.05"""
    report = extension_curve(scale.extension_sigmas, rng, reps=scale.peripheral_reps, n_jobs=n_jobs)
    extended_ok = all(abs(row["extended_mean"] - 1.0) <= 0.05 for row in report.curves)
    at_04 = [row for row in report.curves if abs(row["sigma"] - 0.4) < 1e-9]
    standard_off = bool(at_04) and abs(at_04[0]["standard_mean"] - 1.0) > 0.05
    return AcceptanceResult(
        criterion=8, name="extended_estimator",
        passed=extended_ok and standard_off,
        details={"curve": report.curves},
    )


# ==================== 运行 ====================
def _stamp(result: AcceptanceResult, seconds: float) -> AcceptanceResult:
    """记录耗时并输出通过情况"""
    stamped = result.model_copy(update={"runtime_seconds": seconds})
    mark = "✅" if stamped.passed else "❌"
    logger.info(f"{mark} 验收 {stamped.criterion} ({stamped.name}): {seconds:.1f} s")
    return stamped


def run_acceptance(
    rng: RngStream,
    criteria: Optional[Sequence[int]] = None,
    quick: bool = False,
    n_jobs: Optional[int] = 1,
) -> list[AcceptanceResult]:
    """
    运行验收标准

    Args:
        rng: 主随机数流；第 c 项使用子流 c
        criteria: 要运行的编号（缺省全部）
        quick: 缩小规模
        n_jobs: 并行度

    Returns:
        list[AcceptanceResult]: 按编号排序
    """
    selected = sorted(set(criteria or range(1, 11)))
    if any(c < 1 or c > 10 for c in selected):
        raise ConfigurationError(f"验收标准编号必须在 1..10 之间: {selected}")
    scale = AcceptanceScale.quick() if quick else AcceptanceScale()

    runners: dict[int, Callable[[], Any]] = {
        1: lambda: check_exclusion_identity(rng.child(1)),
        2: lambda: check_table_arithmetic(),
        5: lambda: check_logistic_pathway(scale, rng.child(5), n_jobs),
        6: lambda: check_boosting_pathway(scale, rng.child(6), n_jobs),
        7: lambda: check_diagnostic_power(scale, rng.child(7), n_jobs),
        8: lambda: check_extended_estimator(scale, rng.child(8), n_jobs),
        9: lambda: check_engine_oracles(rng.child(9), scale.bootstrap_replicates),
        10: lambda: check_lambda_convergence(scale, rng.child(10), n_jobs),
    }
    results: dict[int, AcceptanceResult] = {}
    if 3 in selected or 4 in selected:
        # 3 和 4 共用同一次蒙特卡洛，耗时记为整次运行
        started = time.perf_counter()
        shared = check_bias_and_efficiency(scale, rng.child(3), n_jobs)
        elapsed = time.perf_counter() - started
        for result in shared:
            if result.criterion in selected:
                results[result.criterion] = _stamp(result, elapsed)
    for c in selected:
        if c in results:
            continue
        started = time.perf_counter()
        result = runners[c]()
        results[c] = _stamp(result, time.perf_counter() - started)
    return [results[c] for c in selected]
