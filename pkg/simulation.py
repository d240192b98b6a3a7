"""
模拟实验 - 数据生成过程与蒙特卡洛驱动

主实验 DGP:
    V ~ U(0,1)^p，X = sin(4V₁) + V₂V₃ + 2·1{V₄>0.5} + N(0, 0.3²)（二值版本取 1{X > 中位数}）
    W₁ ~ U(−10, 10)，W₂ ~ N(0, 10²)
    Y = 1 + 0.5·X + 2·W₁ + W₂ + ε，ε ~ N(0, σ_ε²)；logistic 版本以同一线性预测为对数几率

外围特征 DGP:
    X ~ N(0,1)，W ~ U[0,1]，Y = 1 + X + 0.5·W + ε，ε = e₁ + e₂ + μ + τ
    X₁ = X + e₁ + e（内生变量），X₂ = X + e₂ + e（候选工具变量）
    e₁, e₂ ~ N(0, σ²)，μ ~ N(0, 0.2²)，τ ~ N(0, 1)，e ~ N(0, 0.1²)
"""
import logging
import time
from typing import Any, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from benchmarks import fit_biased, fit_unbiased, regression_calibration, subset_tree_ensembleiv
from dataset import make_partitioned, split_by_size
from diagnostics import (
    compare_correlations, diagnostic_residuals, permutation_test,
    raw_instrument_sets, relevance_exclusion_summary,
)
from ensemble import LearnerConfig, predict_learners, train_ensemble
from ensemble_iv import (
    build_instrument_sets, default_selection, ensembleiv, ensembleiv_crossfit, ensembleiv_from_predictions,
    estimate_lambda, modified_lambda_inputs, plan_crossfit, transformed_candidates,
)
from errors import ConfigurationError, EstimationError, EstimationFailureError
from models import (
    CoefficientEstimate, Family, LearnerPredictionMatrix, PartitionedDataset,
    RngStream, SampleSet, SecondPhaseSpec, SelectionConfig,
)
from regression import fit_2sls
from reporting import ExperimentReport, RepFailure, summarize_estimates
from tasks import get_parallel_info, run_parallel
from utils import column_corr, format_duration, validate_split_sizes

logger = logging.getLogger(__name__)

MAIN_TRUTH = (1.0, 0.5, 2.0, 1.0)
PERIPHERAL_TRUTH = (1.0, 1.0, 0.5)

BASE_ESTIMATORS = ("biased", "unbiased", "regcal", "regcal_cf")
IV_ESTIMATORS = ("ensembleiv", "ensembleiv_cf", "subset_trees", "extended")
SELECTION_METHODS = ("top_n", "pca", "lasso")


# ==================== 主实验 DGP ====================
class MainDgpConfig(BaseModel):
    """主实验数据生成配置"""
    model_config = ConfigDict(frozen=True)

    mlv_family: Literal["continuous", "binary"] = "continuous"
    second_phase: Family = "linear"
    n_label: int = Field(default=1500, ge=10)
    n_unlabel: int = Field(default=7000, ge=1)
    n_features: int = Field(default=10, ge=4)
    feature_noise: float = Field(default=0.3, ge=0)
    sigma_eps: float = Field(default=2.0, ge=0)
    coefficients: tuple[float, float, float, float] = MAIN_TRUTH

    @model_validator(mode="after")
    def _check(self) -> "MainDgpConfig":
        if self.n_unlabel <= self.n_label:
            raise ConfigurationError(f"n_unlabel ({self.n_unlabel}) 必须大于 n_label ({self.n_label})")
        return self

    @property
    def task(self) -> str:
        return "classification" if self.mlv_family == "binary" else "regression"


def main_spec(config: MainDgpConfig) -> SecondPhaseSpec:
    """主实验第二阶段设定: intercept, mlv, w1, w2"""
    return SecondPhaseSpec(family=config.second_phase, control_names=["w1", "w2"])


def simulate_outcome(
    x: np.ndarray,
    controls: np.ndarray,
    config: MainDgpConfig,
    gen: np.random.Generator,
) -> np.ndarray:
    """
    由 X 和 W 生成 Y

    Args:
        x: MLV
        controls: [W₁, W₂]
        config: DGP 配置（系数、族、σ_ε）
        gen: 随机数生成器

    Returns:
        np.ndarray: Y（logistic 为 0/1）
    """
    b0, b_mlv, b_w1, b_w2 = config.coefficients
    eta = b0 + b_mlv * x + b_w1 * controls[:, 0] + b_w2 * controls[:, 1]
    if config.second_phase == "logistic":
        return (gen.uniform(size=eta.shape[0]) < expit(eta)).astype(float)
    return eta + gen.normal(0.0, config.sigma_eps, size=eta.shape[0])


def generate_main_samples(config: MainDgpConfig, rng: RngStream) -> SampleSet:
    """生成 n_label + n_unlabel 条带真实 X 的样本"""
    gen = rng.generator()
    n = config.n_label + config.n_unlabel
    v = gen.uniform(size=(n, config.n_features))
    x = (
        np.sin(4 * v[:, 0]) + v[:, 1] * v[:, 2] + 2.0 * (v[:, 3] > 0.5)
        + gen.normal(0.0, config.feature_noise, size=n)
    )
    if config.mlv_family == "binary":
        x = (x > np.median(x)).astype(float)
    w = np.column_stack([gen.uniform(-10, 10, size=n), gen.normal(0.0, 10.0, size=n)])
    y = simulate_outcome(x, w, config, gen)
    return SampleSet.from_arrays(
        features=v, outcomes=y, labels=x, controls=w,
        feature_names=[f"v{k + 1}" for k in range(config.n_features)],
        control_names=["w1", "w2"],
        binary_label=config.mlv_family == "binary",
    )


def generate_main_dgp(config: MainDgpConfig, rng: RngStream, k: int = 4) -> PartitionedDataset:
    """
    生成主实验分区数据集

    有标签样本池随机抽取 n_label 条并分成 K 折（第 1 折为 D_test，其余为 D_train）；
    D_unlabel 保留真实 X，仅用于评估。

    Args:
        config: DGP 配置
        rng: 随机数流；(0,) 生成样本，(1,) 抽有标签样本，(2,) 分折
        k: 折数

    Returns:
        PartitionedDataset
    """
    samples = generate_main_samples(config, rng.child(0))
    pool, d_unlabel = split_by_size(samples, config.n_label, rng.child(1))
    return make_partitioned(pool, d_unlabel, k, rng.child(2))


# ==================== 外围特征 DGP ====================
class PeripheralDgpConfig(BaseModel):
    """外围特征 DGP 配置；split 为 train / test / 第三分区的比例"""
    model_config = ConfigDict(frozen=True)

    sigma: float = Field(gt=0)
    n_total: int = Field(default=5000, ge=50)
    split: tuple[int, int, int] = (3, 1, 1)
    third: Literal["diagnostic", "unlabel"] = "diagnostic"

    @model_validator(mode="after")
    def _check(self) -> "PeripheralDgpConfig":
        if min(self.split) <= 0:
            raise ConfigurationError(f"split 比例必须为正: {self.split}")
        ok, message = validate_split_sizes(self.sizes())
        if not ok:
            raise ConfigurationError(message)
        return self

    def sizes(self) -> tuple[int, int, int]:
        total = sum(self.split)
        n_train = int(round(self.n_total * self.split[0] / total))
        n_test = int(round(self.n_total * self.split[1] / total))
        return n_train, n_test, self.n_total - n_train - n_test


class PeripheralDataset(BaseModel):
    """外围特征数据：特征列为 [X₁, X₂]，components 保存各误差分量（与 full 行对齐）"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: PeripheralDgpConfig
    full: SampleSet
    components: dict[str, np.ndarray]
    train: SampleSet
    test: SampleSet
    holdout: SampleSet

    def predictions(self, part: SampleSet) -> LearnerPredictionMatrix:
        """把 [X₁, X₂] 当作两个学习器的预测"""
        return LearnerPredictionMatrix(values=part.features, learner_kind="individual", task="regression")

    def partitioned(self) -> PartitionedDataset:
        """third=unlabel 时的分区数据集"""
        if self.config.third != "unlabel":
            raise ConfigurationError("只有 third=unlabel 的外围数据可以作为分区数据集")
        return PartitionedDataset(d_train=self.train, d_test=self.test, d_unlabel=self.holdout)


def peripheral_spec() -> SecondPhaseSpec:
    return SecondPhaseSpec(family="linear", mlv_name="x", control_names=["w"])


def generate_peripheral_dgp(config: PeripheralDgpConfig, rng: RngStream) -> PeripheralDataset:
    """
    生成外围特征数据并随机划分

    Args:
        config: DGP 配置
        rng: 随机数流；(0,) 生成，(1,) 划分

    Returns:
        PeripheralDataset
    """
    gen = rng.child(0).generator()
    n = config.n_total
    x = gen.normal(0.0, 1.0, size=n)
    w = gen.uniform(0.0, 1.0, size=n)
    e1 = gen.normal(0.0, config.sigma, size=n)
    e2 = gen.normal(0.0, config.sigma, size=n)
    mu = gen.normal(0.0, 0.2, size=n)
    tau = gen.normal(0.0, 1.0, size=n)
    e = gen.normal(0.0, 0.1, size=n)
    eps = e1 + e2 + mu + tau
    b0, bx, bw = PERIPHERAL_TRUTH
    y = b0 + bx * x + bw * w + eps
    full = SampleSet.from_arrays(
        features=np.column_stack([x + e1 + e, x + e2 + e]),
        outcomes=y, labels=x, controls=w.reshape(-1, 1),
        feature_names=["x1", "x2"], control_names=["w"],
    )
    n_train, n_test, _ = config.sizes()
    order = rng.child(1).generator().permutation(n)
    parts = np.split(order, [n_train, n_train + n_test])
    train, test, holdout = (full.take(np.sort(p)) for p in parts)
    components = {"e1": e1, "e2": e2, "mu": mu, "tau": tau, "e": e, "eps": eps}
    for arr in components.values():
        arr.setflags(write=False)
    return PeripheralDataset(
        config=config, full=full, components=components,
        train=train, test=test, holdout=holdout,
    )


# ==================== 蒙特卡洛实验 ====================
def parse_estimator_key(key: str) -> tuple[str, Optional[str]]:
    """
    解析估计量键: biased / unbiased / regcal / regcal_cf / ensembleiv:<方法> / ...

    Returns:
        (估计量, 选择方法或 None)
    """
    base, _, method = key.partition(":")
    if base in BASE_ESTIMATORS:
        if method:
            raise ConfigurationError(f"估计量 {base} 不接受选择方法: {key}")
        return base, None
    if base not in IV_ESTIMATORS:
        raise ConfigurationError(f"未知的估计量: {key}")
    method = method or "pca"
    if method not in SELECTION_METHODS:
        raise ConfigurationError(f"未知的工具变量选择方法: {method}")
    return base, method


class ExperimentSpec(BaseModel):
    """蒙特卡洛实验定义"""
    model_config = ConfigDict(frozen=True)

    name: str = "simulation"
    dgp: MainDgpConfig = MainDgpConfig()
    learner: LearnerConfig = Field(default_factory=LearnerConfig)
    estimators: list[str] = ["biased", "unbiased", "ensembleiv:pca", "ensembleiv_cf:pca"]
    reps: int = Field(default=50, ge=2)
    folds: int = Field(default=4, ge=2)
    selection_n: int = Field(default=3, ge=1)
    lasso_alpha: float = Field(default=0.05, gt=0, lt=1)
    subset_size: int = Field(default=50, ge=1)
    subset_draws: int = Field(default=100, ge=2)
    identical_reps: bool = False  # 每次重复使用同一随机数流

    @model_validator(mode="after")
    def _check(self) -> "ExperimentSpec":
        keys = [parse_estimator_key(k) for k in self.estimators]
        if not keys:
            raise ConfigurationError("至少需要一个估计量")
        if self.dgp.task != self.learner.task:
            raise ConfigurationError(f"{self.dgp.mlv_family} MLV 需要 task={self.dgp.task} 的学习器")
        if any(base == "extended" for base, _ in keys) and self.dgp.second_phase != "linear":
            raise ConfigurationError("extended 估计量只支持线性第二阶段")
        if any(base == "subset_trees" for base, _ in keys):
            if self.learner.technique != "bagging":
                raise ConfigurationError("subset_trees 需要 bagging 学习器")
            if self.subset_size >= self.learner.n_learners:
                raise ConfigurationError(f"subset_size {self.subset_size} 必须小于 M={self.learner.n_learners}")
        return self

    def selection(self, method: str) -> SelectionConfig:
        return default_selection().model_copy(
            update={"method": method, "n": self.selection_n, "lasso_alpha": self.lasso_alpha}
        )


class RepOutcome(BaseModel):
    """一次重复中一个估计量的结果"""
    model_config = ConfigDict(frozen=True)

    key: str
    estimate: Optional[CoefficientEstimate] = None
    failure: Optional[str] = None


def _estimate_one(
    key: str,
    spec: ExperimentSpec,
    data: PartitionedDataset,
    model,
    plan_factory,
    rng: RngStream,
) -> CoefficientEstimate:
    base, method = parse_estimator_key(key)
    second = main_spec(spec.dgp)
    if base == "biased":
        return fit_biased(model, data.d_unlabel, second)
    if base == "unbiased":
        return fit_unbiased(data.labeled_pool(), second)
    if base == "regcal":
        return regression_calibration(model, data.d_test, data.d_unlabel, second)
    if base == "regcal_cf":
        return regression_calibration(None, None, data.d_unlabel, second, crossfit=True, plan=plan_factory())
    selection = spec.selection(method)
    if base == "ensembleiv":
        return ensembleiv(data, model, second, selection)
    if base == "extended":
        return ensembleiv(data, model, second, selection, lambda_mode="modified")
    if base == "ensembleiv_cf":
        return ensembleiv_crossfit(
            data.labeled_pool(), data.d_unlabel, spec.folds, second, selection,
            spec.learner, rng, plan=plan_factory(),
        )
    return subset_tree_ensembleiv(data, model, second, spec.subset_size, spec.subset_draws, rng, selection)


def run_repetition(spec: ExperimentSpec, rng: RngStream) -> list[RepOutcome]:
    """
    一次完整重复：生成数据、训练集成、计算全部估计量

    Args:
        spec: 实验定义
        rng: 本次重复的随机数流；(0,) 数据，(1,) 训练，(2,) 交叉拟合计划，(3, e) 第 e 个估计量

    Returns:
        list[RepOutcome]: 与 spec.estimators 同序
    """
    try:
        data = generate_main_dgp(spec.dgp, rng.child(0), spec.folds)
        model = train_ensemble(data.d_train, spec.learner, rng.child(1))
    except EstimationError as e:
        return [RepOutcome(key=k, failure=f"{type(e).__name__}: {e}") for k in spec.estimators]

    cache: dict[str, Any] = {}

    def plan_factory():
        # 同一次重复内的交叉拟合估计量共享折与模型
        if "plan" not in cache:
            cache["plan"] = plan_crossfit(data.labeled_pool(), spec.folds, spec.learner, rng.child(2))
        return cache["plan"]

    outcomes = []
    for e, key in enumerate(spec.estimators):
        try:
            est = _estimate_one(key, spec, data, model, plan_factory, rng.child(3, e))
            outcomes.append(RepOutcome(key=key, estimate=est))
        except EstimationError as err:
            outcomes.append(RepOutcome(key=key, failure=f"{type(err).__name__}: {err}"))
    return outcomes


def _repetition_job(job: tuple) -> list[RepOutcome]:
    spec, stream = job
    return run_repetition(spec, stream)


def run_monte_carlo(
    spec: ExperimentSpec,
    rng: RngStream,
    n_jobs: Optional[int] = 1,
    truth: Sequence[float] = MAIN_TRUTH,
) -> ExperimentReport:
    """
    蒙特卡洛实验：每次重复重新生成数据、训练集成并计算所有估计量

    Args:
        spec: 实验定义
        rng: 主随机数流；第 r 次重复使用子流 r（identical_reps 时全部使用子流 0）
        n_jobs: 重复并行度（进程）
        truth: 真实系数

    Returns:
        ExperimentReport

    Raises:
        EstimationFailureError: 某个估计量在所有重复中都失败
    """
    started = time.perf_counter()
    jobs = [(spec, rng.child(0 if spec.identical_reps else r)) for r in range(spec.reps)]
    logger.info(f"🎲 蒙特卡洛 {spec.name}: R={spec.reps}, 估计量={spec.estimators}")
    results = run_parallel(_repetition_job, jobs, n_jobs=n_jobs)

    summaries = {}
    for e, key in enumerate(spec.estimators):
        fits = [(r, res[e].estimate) for r, res in enumerate(results) if res[e].estimate is not None]
        failures = [RepFailure(rep=r, reason=res[e].failure) for r, res in enumerate(results) if res[e].failure]
        if not fits:
            raise EstimationFailureError(f"估计量 {key} 在全部 {spec.reps} 次重复中失败: {failures[0].reason}")
        if failures:
            logger.warning(f"⚠️ {key}: {len(failures)}/{spec.reps} 次重复失败")
        summaries[key] = summarize_estimates(
            fits[0][1].names,
            [f.point for _, f in fits],
            truth=truth,
            ses=[f.se for _, f in fits],
            failures=failures,
        )
    runtime = time.perf_counter() - started
    logger.info(f"✅ 蒙特卡洛 {spec.name} 完成，用时 {format_duration(runtime)}")
    return ExperimentReport(
        name=spec.name,
        seed=rng.master_seed,
        config={**spec.model_dump(mode="json"), "parallel": get_parallel_info(n_jobs)},
        truth=list(truth),
        estimators=summaries,
        runtime_seconds=runtime,
    )


# ==================== 敏感性分析 ====================
SweepParameter = Literal["n_label", "n_learners", "sigma_eps", "folds", "selection_n"]


def _vary(spec: ExperimentSpec, parameter: SweepParameter, value: float) -> ExperimentSpec:
    if parameter == "n_label":
        return spec.model_copy(update={"dgp": MainDgpConfig(**{**spec.dgp.model_dump(), "n_label": int(value)})})
    if parameter == "sigma_eps":
        return spec.model_copy(update={"dgp": MainDgpConfig(**{**spec.dgp.model_dump(), "sigma_eps": float(value)})})
    if parameter == "n_learners":
        return spec.model_copy(update={"learner": LearnerConfig(**{**spec.learner.model_dump(), "n_learners": int(value)})})
    return ExperimentSpec(**{**spec.model_dump(), parameter: int(value)})


def sensitivity_sweep(
    spec: ExperimentSpec,
    parameter: SweepParameter,
    values: Sequence[float],
    rng: RngStream,
    n_jobs: Optional[int] = 1,
    coefficient: str = "mlv",
) -> ExperimentReport:
    """
    一次改变一个参数，记录每个取值下各估计量 β_MLV 的均值与经验 95% 区间

    Returns:
        ExperimentReport: curves 每行为 (参数值, 估计量)
    """
    started = time.perf_counter()
    rows = []
    for v, value in enumerate(values):
        varied = _vary(spec, parameter, value)
        report = run_monte_carlo(varied, rng.child(v), n_jobs=n_jobs)
        for key, summary in report.estimators.items():
            draws = summary.coef_draws(coefficient)
            rows.append({
                "parameter": parameter,
                "value": value,
                "estimator": key,
                "mean": float(draws.mean()),
                "q025": float(np.quantile(draws, 0.025)),
                "q975": float(np.quantile(draws, 0.975)),
                "mse": summary.mse,
                "failures": len(summary.failures),
            })
    return ExperimentReport(
        name=f"{spec.name}_sensitivity_{parameter}",
        seed=rng.master_seed,
        config={**spec.model_dump(mode="json"), "parameter": parameter, "values": list(values)},
        truth=list(MAIN_TRUTH),
        curves=rows,
        runtime_seconds=time.perf_counter() - started,
    )


# ==================== 外围特征实验 ====================
class PowerRep(BaseModel):
    """外围特征诊断一次重复的结果"""
    model_config = ConfigDict(frozen=True)

    p_value: float
    ts: float
    corr_before: float
    corr_after: float
    iv_estimate: Optional[float] = None


def peripheral_diagnostic_rep(
    config: PeripheralDgpConfig,
    rng: RngStream,
    permutations: int = 1000,
) -> PowerRep:
    """
    外围特征诊断的一次重复

    X₁ 为内生变量，X₂ 为候选工具变量；λ 在 D_test 上估计，变换应用到 D_diagnostic；
    残差来自 D_train ∪ D_test 上的无偏 OLS；IV 估计为 D_diagnostic 上的 2SLS。

    Args:
        config: DGP 配置（third=diagnostic）
        rng: 随机数流；(0,) 数据，(1,) 置换
        permutations: 置换次数
    """
    data = generate_peripheral_dgp(config, rng.child(0))
    spec = peripheral_spec()
    fit_pool = SampleSet.concat([data.train, data.test])
    r = diagnostic_residuals(fit_pool, data.holdout, spec)
    instruments = transformed_candidates(
        0, data.predictions(data.test), data.test.labels, data.predictions(data.holdout),
    )
    if not instruments:
        raise EstimationFailureError("X₁/X₂ 的 λ 退化")
    x_diag = data.holdout.labels
    result = permutation_test(instruments, x_diag, r, permutations, rng.child(1))
    z_tilde = instruments[0].values
    corr_before = float(abs(column_corr((data.holdout.features[:, 1] - x_diag).reshape(-1, 1), r)[0]))
    iv = fit_2sls(
        data.holdout.outcomes, data.holdout.features[:, 0], z_tilde.reshape(-1, 1),
        controls=data.holdout.controls, endogenous_name="x", control_names=["w"],
    )
    return PowerRep(
        p_value=result.p_value,
        ts=result.ts_observed,
        corr_before=corr_before,
        corr_after=result.ts_observed,
        iv_estimate=iv.coef("x"),
    )


def _power_job(job: tuple) -> Optional[PowerRep]:
    config, stream, permutations = job
    try:
        return peripheral_diagnostic_rep(config, stream, permutations)
    except EstimationError as e:
        logger.debug(f"外围诊断重复失败: {e}")
        return None


def _power_point(
    config: PeripheralDgpConfig,
    reps: int,
    rng: RngStream,
    permutations: int,
    alpha: float,
    n_jobs: Optional[int],
) -> dict[str, Any]:
    jobs = [(config, rng.child(r), permutations) for r in range(reps)]
    results = [r for r in run_parallel(_power_job, jobs, n_jobs=n_jobs) if r is not None]
    if not results:
        raise EstimationFailureError(f"σ={config.sigma}, n={config.n_total}: 全部重复失败")
    p = np.array([r.p_value for r in results])
    before = np.array([r.corr_before for r in results])
    after = np.array([r.corr_after for r in results])
    iv = np.array([r.iv_estimate for r in results])
    comparison = compare_correlations(before, after)
    return {
        "sigma": config.sigma,
        "n_total": config.n_total,
        "reps": len(results),
        "failures": reps - len(results),
        "rejection_rate": float(np.mean(p < alpha)),
        "mean_corr_before": comparison.before_mean,
        "mean_corr_after": comparison.after_mean,
        "paired_t_p": comparison.t_p_value,
        "iv_mean": float(iv.mean()),
        "iv_q025": float(np.quantile(iv, 0.025)),
        "iv_q975": float(np.quantile(iv, 0.975)),
    }


def power_curve(
    sigmas: Sequence[float],
    rng: RngStream,
    reps: int = 100,
    n_total: int = 5000,
    permutations: int = 1000,
    alpha: float = 0.05,
    n_jobs: Optional[int] = 1,
) -> ExperimentReport:
    """
    诊断检验功效随 σ 的变化（固定样本量，3:1:1 划分）

    每个 σ 报告拒绝率、变换前后平均 |误差-残差相关|、配对 t 检验 p 值、IV 估计均值与经验 95% 区间。
    """
    started = time.perf_counter()
    rows = []
    for s, sigma in enumerate(sigmas):
        config = PeripheralDgpConfig(sigma=sigma, n_total=n_total)
        rows.append(_power_point(config, reps, rng.child(s), permutations, alpha, n_jobs))
        logger.info(f"📈 σ={sigma:.2f}: 拒绝率 {rows[-1]['rejection_rate']:.2f}")
    return ExperimentReport(
        name="power_curve",
        seed=rng.master_seed,
        config={"sigmas": list(sigmas), "reps": reps, "n_total": n_total,
                "permutations": permutations, "alpha": alpha},
        truth=list(PERIPHERAL_TRUTH),
        curves=rows,
        runtime_seconds=time.perf_counter() - started,
    )


def sample_size_curve(
    n_totals: Sequence[int],
    rng: RngStream,
    sigma: float = 0.24,
    reps: int = 100,
    permutations: int = 1000,
    alpha: float = 0.05,
    n_jobs: Optional[int] = 1,
) -> ExperimentReport:
    """固定 σ，改变总样本量（保持 3:1:1）"""
    started = time.perf_counter()
    rows = []
    for s, n_total in enumerate(n_totals):
        config = PeripheralDgpConfig(sigma=sigma, n_total=n_total)
        rows.append(_power_point(config, reps, rng.child(s), permutations, alpha, n_jobs))
    return ExperimentReport(
        name="sample_size_curve",
        seed=rng.master_seed,
        config={"n_totals": list(n_totals), "sigma": sigma, "reps": reps,
                "permutations": permutations, "alpha": alpha},
        truth=list(PERIPHERAL_TRUTH),
        curves=rows,
        runtime_seconds=time.perf_counter() - started,
    )


def extension_rep(config: PeripheralDgpConfig, rng: RngStream) -> tuple[float, float]:
    """
    标准 λ 与修正 λ 的 IV 估计（X₁ 内生，X₂ 候选，D_unlabel 上估计）

    Returns:
        (标准估计 β̂_x, 修正估计 β̂_x)
    """
    data = generate_peripheral_dgp(config, rng)
    spec = peripheral_spec()
    pred_test = data.predictions(data.test)
    pred_unlabel = data.predictions(data.holdout)
    selection = SelectionConfig(method="top_n", n=1)
    standard = ensembleiv_from_predictions(
        pred_test, data.test.labels, pred_unlabel, data.holdout, spec, selection, learners=[0],
    )
    residuals, beta_hat = modified_lambda_inputs(data.train, data.test, spec)
    extended = ensembleiv_from_predictions(
        pred_test, data.test.labels, pred_unlabel, data.holdout, spec, selection,
        residuals_test=residuals, beta_hat=beta_hat, learners=[0],
    )
    return standard.coef("x"), extended.coef("x")


def _extension_job(job: tuple) -> Optional[tuple[float, float]]:
    config, stream = job
    try:
        return extension_rep(config, stream)
    except EstimationError as e:
        logger.debug(f"扩展估计重复失败: {e}")
        return None


def extension_curve(
    sigmas: Sequence[float],
    rng: RngStream,
    reps: int = 100,
    n_total: int = 14000,
    n_jobs: Optional[int] = 1,
) -> ExperimentReport:
    """
    修正 λ 扩展估计量随 σ 的表现（3000 / 1000 / 10000 划分）

    Returns:
        ExperimentReport: curves 每行给出标准与修正估计的均值和经验 95% 区间
    """
    started = time.perf_counter()
    rows = []
    for s, sigma in enumerate(sigmas):
        config = PeripheralDgpConfig(sigma=sigma, n_total=n_total, split=(3, 1, 10), third="unlabel")
        jobs = [(config, rng.child(s, r)) for r in range(reps)]
        results = [r for r in run_parallel(_extension_job, jobs, n_jobs=n_jobs) if r is not None]
        if not results:
            raise EstimationFailureError(f"σ={sigma}: 全部重复失败")
        draws = np.array(results)
        rows.append({
            "sigma": sigma,
            "reps": len(results),
            "failures": reps - len(results),
            "standard_mean": float(draws[:, 0].mean()),
            "standard_q025": float(np.quantile(draws[:, 0], 0.025)),
            "standard_q975": float(np.quantile(draws[:, 0], 0.975)),
            "extended_mean": float(draws[:, 1].mean()),
            "extended_q025": float(np.quantile(draws[:, 1], 0.025)),
            "extended_q975": float(np.quantile(draws[:, 1], 0.975)),
        })
        logger.info(f"📈 σ={sigma:.2f}: 标准 {rows[-1]['standard_mean']:.3f}, 修正 {rows[-1]['extended_mean']:.3f}")
    return ExperimentReport(
        name="extension_curve",
        seed=rng.master_seed,
        config={"sigmas": list(sigmas), "reps": reps, "n_total": n_total},
        truth=list(PERIPHERAL_TRUTH),
        curves=rows,
        runtime_seconds=time.perf_counter() - started,
    )


# ==================== λ̂ 收敛 ====================
def _population_sample(dgp: MainDgpConfig, n: int, rng: RngStream) -> SampleSet:
    """从主实验总体新抽 n 条带真实 X 的样本"""
    return generate_main_samples(dgp.model_copy(update={"n_label": 0, "n_unlabel": n}), rng)


def _convergence_job(job: tuple) -> Optional[float]:
    model, dgp, n, pair, lambda_ref, stream = job
    sample = _population_sample(dgp, n, stream)
    pred = predict_learners(model, sample)
    try:
        lam = estimate_lambda(pred.column(pair[0]), pred.column(pair[1]), sample.labels, pair)
    except EstimationError as e:
        logger.debug(f"n={n}: λ̂ 退化: {e}")
        return None
    return abs(lam.lambda_hat - lambda_ref)


def lambda_convergence(
    rng: RngStream,
    sizes: Sequence[int] = (500, 2000, 8000),
    reps: int = 50,
    dgp: Optional[MainDgpConfig] = None,
    learner: Optional[LearnerConfig] = None,
    pair: tuple[int, int] = (0, 1),
    ref_factor: int = 4,
    n_jobs: Optional[int] = 1,
) -> ExperimentReport:
    """
    固定一个训练好的集成，λ̂ 随评估样本量收敛

    在主实验 DGP 的 D_train 上训练一次集成，固定学习器对 (j, k)。参照值 λ̂_ref 在
    max(sizes)·ref_factor 条新样本上估计；每个 n 再抽 reps 份互不重叠的新样本估计 λ̂ₙ。

    Args:
        rng: 随机数流；子流 0 训练数据，1 训练集成，2 参照样本，(3, s, r) 评估样本
        sizes: 评估样本量
        reps: 每个样本量的重复次数
        dgp: 主实验 DGP，缺省为默认配置
        learner: 学习器配置，缺省与 DGP 的任务一致
        pair: 学习器对 (j, k)，j 为内生学习器
        ref_factor: 参照样本量相对 max(sizes) 的倍数

    Returns:
        ExperimentReport: curves 每行为 (n, mean|λ̂ₙ − λ̂_ref|, sd, λ̂_ref)

    Raises:
        ConfigurationError: 学习器对非法
        DegenerateLambdaError: 参照样本上 λ̂ 退化
    """
    started = time.perf_counter()
    dgp = dgp or MainDgpConfig()
    learner = learner or LearnerConfig(task=dgp.task)
    j, k = pair
    if j == k or not (0 <= j < learner.n_learners and 0 <= k < learner.n_learners):
        raise ConfigurationError(f"学习器对 {pair} 非法（M={learner.n_learners}）")
    if not sizes or min(sizes) < 2:
        raise ConfigurationError(f"评估样本量必须 ≥ 2: {list(sizes)}")

    data = generate_main_dgp(dgp, rng.child(0))
    model = train_ensemble(data.d_train, learner, rng.child(1), n_jobs=n_jobs)
    n_ref = int(max(sizes)) * ref_factor
    reference = _population_sample(dgp, n_ref, rng.child(2))
    pred_ref = predict_learners(model, reference)
    lambda_ref = estimate_lambda(pred_ref.column(j), pred_ref.column(k), reference.labels, pair).lambda_hat
    logger.info(f"🎯 λ̂_ref = {lambda_ref:.4f}（学习器对 {pair}，{n_ref} 条样本）")

    rows = []
    for s, n in enumerate(sizes):
        jobs = [(model, dgp, int(n), pair, lambda_ref, rng.child(3, s, r)) for r in range(reps)]
        errors = np.array([e for e in run_parallel(_convergence_job, jobs, n_jobs=n_jobs) if e is not None])
        if errors.size == 0:
            raise EstimationFailureError(f"n={n}: 全部重复的 λ̂ 都退化")
        rows.append({
            "n": int(n),
            "reps": int(errors.size),
            "failures": reps - int(errors.size),
            "mean_abs_error": float(errors.mean()),
            "sd_abs_error": float(errors.std(ddof=1)) if errors.size > 1 else 0.0,
            "lambda_ref": lambda_ref,
        })
        logger.info(f"📉 n={n}: mean|λ̂ − λ̂_ref| = {rows[-1]['mean_abs_error']:.4f}")
    return ExperimentReport(
        name="lambda_convergence",
        seed=rng.master_seed,
        config={
            "sizes": [int(n) for n in sizes], "reps": reps, "pair": list(pair), "n_ref": n_ref,
            "technique": learner.technique, "n_learners": learner.n_learners,
        },
        curves=rows,
        runtime_seconds=time.perf_counter() - started,
    )


def population_lambda(sigma: float) -> float:
    """
    外围 DGP 中 (X̂=X₁, Z=X₂) 的总体 λ

    e = e₁ + e，Cov(Z, e) = Var(e) = 0.01，Cov(X̂, e) = σ² + 0.01，σ_X̂ = σ_Z
    """
    return 0.01 / (sigma ** 2 + 0.01)


def peripheral_lambda_convergence(
    rng: RngStream,
    sizes: Sequence[int] = (500, 2000, 8000),
    reps: int = 50,
    sigma: float = 0.2,
) -> ExperimentReport:
    """
    外围 DGP 中 λ̂ 随样本量收敛到解析总体 λ

    Returns:
        ExperimentReport: curves 每行为 (n, mean|λ̂ − λ|, sd)
    """
    started = time.perf_counter()
    target = population_lambda(sigma)
    rows = []
    for s, n in enumerate(sizes):
        errors = []
        for r in range(reps):
            config = PeripheralDgpConfig(sigma=sigma, n_total=max(int(n), 50))
            data = generate_peripheral_dgp(config, rng.child(s, r))
            test = data.full.take(np.arange(int(n)))
            lam = estimate_lambda(test.features[:, 0], test.features[:, 1], test.labels)
            errors.append(abs(lam.lambda_hat - target))
        errors = np.array(errors)
        rows.append({
            "n": int(n),
            "mean_abs_error": float(errors.mean()),
            "sd_abs_error": float(errors.std(ddof=1)),
            "lambda_ref": target,
        })
    return ExperimentReport(
        name="peripheral_lambda_convergence",
        seed=rng.master_seed,
        config={"sizes": list(sizes), "reps": reps, "sigma": sigma},
        curves=rows,
        runtime_seconds=time.perf_counter() - started,
    )


# ==================== 相关性 / 排他性实验 ====================
def relevance_experiment(
    dgp: MainDgpConfig,
    learner: LearnerConfig,
    selection: SelectionConfig,
    rng: RngStream,
    reps: int = 1,
    k: int = 4,
    n_jobs: Optional[int] = 1,
) -> ExperimentReport:
    """
    变换与选择前后工具变量的平均相关性 / 排他性（在带真实 X 的 D_unlabel 上计算）

    变换前：每个学习器的候选为其余全部学习器的原始预测；变换后：选出的工具变量。

    Returns:
        ExperimentReport: curves 每行为 (重复, 阶段, 学习器, relevance, exclusion)
    """
    started = time.perf_counter()
    rows = []
    for r in range(reps):
        stream = rng.child(r)
        data = generate_main_dgp(dgp, stream.child(0), k)
        model = train_ensemble(data.d_train, learner, stream.child(1), n_jobs=n_jobs)
        pred_test = predict_learners(model, data.d_test)
        pred_unlabel = predict_learners(model, data.d_unlabel)
        truth = data.d_unlabel.require_labels("D_unlabel")
        before = relevance_exclusion_summary(pred_unlabel, truth, raw_instrument_sets(pred_unlabel), "before")
        sets = build_instrument_sets(pred_test, data.d_test.labels, pred_unlabel, selection)
        after = relevance_exclusion_summary(pred_unlabel, truth, sets, "after")
        for summary in (before, after):
            for i, rel, exc in zip(summary.learner_indices, summary.relevance, summary.exclusion):
                rows.append({"rep": r, "stage": summary.stage, "learner": i, "relevance": rel, "exclusion": exc})
        logger.info(
            f"🔎 重复 {r}: 排他性 {before.mean_exclusion:.4f} → {after.mean_exclusion:.4f}, "
            f"相关性 {before.mean_relevance:.4f} → {after.mean_relevance:.4f}"
        )
    return ExperimentReport(
        name="relevance_exclusion",
        seed=rng.master_seed,
        config={"dgp": dgp.model_dump(mode="json"), "learner": learner.model_dump(mode="json"),
                "selection": selection.model_dump(mode="json"), "reps": reps},
        curves=rows,
        runtime_seconds=time.perf_counter() - started,
    )
