"""
外围特征诊断

检验变换后工具变量的误差 Z̃ − X 是否与回归误差相关：
    1. 预留 D_diagnostic
    2. 在其余有标签数据上估计无偏 OLS，得到 D_diagnostic 上的残差 r
    3. 在其余数据上训练集成、估计 λ，变换应用到 D_diagnostic
    4. TS = 所有 (i, j) 对 |Corr(Z̃⁽ʲ⁾ᵢ − X, r)| 的平均
    5. 置换 r 得到 TS 的零分布和经验 p 值；多折 p 值用 Fisher 方法合并
"""
import logging
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from pydantic_settings import BaseSettings
from scipy import stats

from dataset import holdout_diagnostic, partition_labeled, split_by_size, split_fold
from ensemble import LearnerConfig, predict_learners, train_ensemble
from ensemble_iv import LambdaMode, modified_lambda_inputs, transformed_candidates
from errors import ConfigurationError, ShapeError
from models import (
    DiagnosticResult, LearnerPredictionMatrix, PairCorrelation, RelevanceExclusionSummary,
    RngStream, SampleSet, SecondPhaseSpec, SelectedInstruments, TransformedInstrument,
)
from regression import fit_ols, second_phase_design
from utils import column_corr

logger = logging.getLogger(__name__)


class DiagnosticSettings(BaseSettings):
    """诊断流程配置"""
    permutations: int = 10000
    alpha: float = 0.05
    test_fraction: float = 0.25  # 其余有标签数据中用于估计 λ 的比例
    batch_size: int = 256
    max_pairs_in_report: int = 1000

    class Config:
        env_file = ".env"
        env_prefix = "DIAG_"
        extra = "ignore"


diag_settings = DiagnosticSettings()


def load_diag_settings(env_file: Optional[str] = None) -> DiagnosticSettings:
    """从配置文件重新读取诊断配置（--config），缺省读取 .env"""
    global diag_settings
    diag_settings = DiagnosticSettings(_env_file=env_file or ".env")
    return diag_settings


# ==================== 残差与误差列 ====================
def diagnostic_residuals(
    fit_pool: SampleSet,
    d_diagnostic: SampleSet,
    spec: SecondPhaseSpec,
) -> np.ndarray:
    """
    在 fit_pool（有标签数据去掉 D_diagnostic）上估计无偏 OLS，返回 D_diagnostic 上的残差

    Args:
        fit_pool: 用于拟合的有标签数据
        d_diagnostic: 诊断分区
        spec: 第二阶段设定（只用到列结构）

    Returns:
        np.ndarray: r_diagnostic
    """
    design = second_phase_design(fit_pool.require_labels("拟合数据"), fit_pool.controls, spec)
    fit = fit_ols(design, fit_pool.outcomes)
    diag_design = second_phase_design(d_diagnostic.require_labels("D_diagnostic"), d_diagnostic.controls, spec)
    return d_diagnostic.outcomes - fit.predict(diag_design)


def diagnostic_instruments(
    pred_fit: LearnerPredictionMatrix,
    x_fit: np.ndarray,
    pred_diagnostic: LearnerPredictionMatrix,
    residuals_fit: Optional[np.ndarray] = None,
    beta_hat: Optional[float] = None,
) -> list[TransformedInstrument]:
    """全部有序对 (i, j) 的 Z̃，λ 在拟合分区估计，变换应用到 D_diagnostic"""
    out: list[TransformedInstrument] = []
    for i in range(pred_fit.n_learners):
        out.extend(transformed_candidates(i, pred_fit, x_fit, pred_diagnostic, residuals_fit, beta_hat))
    dropped = pred_fit.n_learners * (pred_fit.n_learners - 1) - len(out)
    if dropped:
        logger.warning(f"⚠️ 诊断: {dropped} 个 λ 对退化，已剔除")
    return out


class _Prepared(BaseModel):
    """标准化后的误差矩阵与残差"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    errors: np.ndarray
    residuals: np.ndarray
    pairs: list[tuple[int, int]]
    excluded: list[tuple[int, int]]


def _prepare(
    instruments: Sequence[TransformedInstrument],
    x_diagnostic: np.ndarray,
    r_diagnostic: np.ndarray,
) -> _Prepared:
    if not instruments:
        raise ConfigurationError("诊断至少需要一个 (i, j) 对")
    x = np.asarray(x_diagnostic, dtype=float).reshape(-1)
    r = np.asarray(r_diagnostic, dtype=float).reshape(-1)
    if x.shape[0] != r.shape[0]:
        raise ShapeError("x_diagnostic 与 r_diagnostic 长度不一致")
    errors = np.column_stack([inst.values for inst in instruments]) - x[:, None]
    if errors.shape[0] != x.shape[0]:
        raise ShapeError("工具变量长度与 D_diagnostic 不一致")
    pairs = [(inst.endogenous_index, inst.instrument_index) for inst in instruments]

    centered = errors - errors.mean(axis=0)
    scale = np.sqrt((centered ** 2).mean(axis=0))
    keep = scale > 1e-12 * (1.0 + np.abs(errors).max(axis=0))
    excluded = [p for p, k in zip(pairs, keep) if not k]
    if excluded:
        logger.warning(f"⚠️ {len(excluded)} 个误差列方差为 0，已从 TS 中剔除")
    if not keep.any():
        raise ConfigurationError("所有误差列方差为 0")
    rc = r - r.mean()
    r_scale = np.sqrt((rc ** 2).mean())
    if r_scale == 0.0:
        raise ConfigurationError("r_diagnostic 方差为 0")
    return _Prepared(
        errors=centered[:, keep] / scale[keep],
        residuals=rc / r_scale,
        pairs=[p for p, k in zip(pairs, keep) if k],
        excluded=excluded,
    )


def _ts(prepared: _Prepared, residual_columns: np.ndarray) -> np.ndarray:
    """每列残差对应的 TS（residual_columns 为 n×b）"""
    n = prepared.residuals.shape[0]
    corr = prepared.errors.T @ residual_columns / n
    return np.clip(np.mean(np.abs(corr), axis=0), 0.0, 1.0)


def compute_ts(
    instruments: Sequence[TransformedInstrument],
    x_diagnostic: np.ndarray,
    r_diagnostic: np.ndarray,
) -> DiagnosticResult:
    """
    TS = 所有 (i, j) 对 |Corr(Z̃⁽ʲ⁾ᵢ − X, r)| 的平均（置换前）

    Args:
        instruments: D_diagnostic 上的变换工具变量
        x_diagnostic: D_diagnostic 上的真实 X
        r_diagnostic: D_diagnostic 上的残差

    Returns:
        DiagnosticResult: permutations=0, p_value=1
    """
    prepared = _prepare(instruments, x_diagnostic, r_diagnostic)
    corr = prepared.errors.T @ prepared.residuals / prepared.residuals.shape[0]
    return DiagnosticResult(
        pair_correlations=[PairCorrelation(i=i, j=j, corr=float(c)) for (i, j), c in zip(prepared.pairs, corr)],
        ts_observed=float(_ts(prepared, prepared.residuals[:, None])[0]),
        excluded_pairs=prepared.excluded,
    )


def permuted_ts(
    instruments: Sequence[TransformedInstrument],
    x_diagnostic: np.ndarray,
    r_diagnostic: np.ndarray,
    permutation: np.ndarray,
) -> float:
    """按给定置换重排 r 后的 TS"""
    prepared = _prepare(instruments, x_diagnostic, r_diagnostic)
    return float(_ts(prepared, prepared.residuals[np.asarray(permutation)][:, None])[0])


def permutation_test(
    instruments: Sequence[TransformedInstrument],
    x_diagnostic: np.ndarray,
    r_diagnostic: np.ndarray,
    permutations: Optional[int] = None,
    rng: Optional[RngStream] = None,
    batch_size: Optional[int] = None,
) -> DiagnosticResult:
    """
    置换检验

    p = (1 + #{置换 TS ≥ 观测 TS}) / (P + 1)

    Args:
        instruments: D_diagnostic 上的变换工具变量
        x_diagnostic: 真实 X
        r_diagnostic: 残差
        permutations: 置换次数 P（≥ 100）
        rng: 随机数流；置换按批次从同一个流依次抽取，批大小不影响结果
        batch_size: 每批置换数

    Returns:
        DiagnosticResult
    """
    permutations = permutations if permutations is not None else diag_settings.permutations
    if permutations < 100:
        raise ConfigurationError(f"置换次数必须 ≥ 100，当前 {permutations}")
    rng = rng or RngStream(master_seed=0)
    batch_size = batch_size if batch_size is not None else diag_settings.batch_size
    if batch_size < 1:
        raise ConfigurationError(f"置换批大小必须 ≥ 1，当前 {batch_size}")
    prepared = _prepare(instruments, x_diagnostic, r_diagnostic)
    n = prepared.residuals.shape[0]
    observed = compute_ts(instruments, x_diagnostic, r_diagnostic)

    gen = rng.generator()
    distribution = np.empty(permutations)
    for start in range(0, permutations, batch_size):
        size = min(batch_size, permutations - start)
        index = np.column_stack([gen.permutation(n) for _ in range(size)])
        distribution[start:start + size] = _ts(prepared, prepared.residuals[index])
    exceed = int(np.sum(distribution >= observed.ts_observed))
    p_value = (1 + exceed) / (permutations + 1)
    return observed.model_copy(update={
        "permutation_distribution": distribution.tolist(),
        "p_value": p_value,
        "permutations": permutations,
    })


def fisher_combine(p_values: Sequence[float], permutations: Optional[int] = None) -> float:
    """
    Fisher 方法合并 p 值: −2Σln(pₖ) ~ χ²(2K)

    Args:
        p_values: 各折 p 值，应在 (0, 1]；p = 0 截断为 1/(P+1)
        permutations: 截断用的 P

    Returns:
        float: 合并后的 p 值
    """
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        raise ConfigurationError("至少需要一个 p 值")
    if np.any(p < 0) or np.any(p > 1):
        raise ConfigurationError(f"p 值必须在 [0, 1] 内: {p.tolist()}")
    if np.any(p == 0):
        permutations = permutations if permutations is not None else diag_settings.permutations
        floor = 1.0 / (permutations + 1)
        logger.warning(f"⚠️ Fisher 合并: p=0 截断为 {floor:.2e}")
        p = np.where(p == 0, floor, p)
    statistic = -2.0 * float(np.sum(np.log(p)))
    return float(stats.chi2.sf(statistic, 2 * p.size))


# ==================== 相关性 / 排他性 ====================
def raw_instrument_sets(predictions: Union[LearnerPredictionMatrix, np.ndarray]) -> dict[int, np.ndarray]:
    """变换前：学习器 i 的候选为其余所有学习器的原始预测"""
    values = predictions.values if isinstance(predictions, LearnerPredictionMatrix) else np.asarray(predictions)
    m = values.shape[1]
    return {i: np.delete(values, i, axis=1) for i in range(m)}


def relevance_exclusion_summary(
    predictions: Union[LearnerPredictionMatrix, np.ndarray],
    truth: np.ndarray,
    instrument_sets: Mapping[int, Union[np.ndarray, SelectedInstruments]],
    stage: str,
) -> RelevanceExclusionSummary:
    """
    逐学习器平均相关性 |Corr(X̂⁽ⁱ⁾, z)| 与平均排他性 |Corr(X̂⁽ⁱ⁾ − X, z)|

    Args:
        predictions: 与工具变量同一批样本上的预测矩阵
        truth: 真实 X
        instrument_sets: 学习器编号 → 工具变量矩阵
        stage: before / after

    Returns:
        RelevanceExclusionSummary
    """
    values = predictions.values if isinstance(predictions, LearnerPredictionMatrix) else np.asarray(predictions)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if truth.shape[0] != values.shape[0]:
        raise ShapeError("truth 长度与预测矩阵行数不一致")
    indices, relevance, exclusion = [], [], []
    for i in sorted(instrument_sets):
        z = instrument_sets[i]
        z = z.columns if isinstance(z, SelectedInstruments) else np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        if z.shape[1] == 0:
            raise ConfigurationError(f"学习器 {i} 的工具变量集合为空")
        if z.shape[0] != values.shape[0]:
            raise ShapeError(f"学习器 {i} 的工具变量行数不一致")
        xhat = values[:, i]
        indices.append(int(i))
        relevance.append(float(np.mean(np.abs(column_corr(z, xhat)))))
        exclusion.append(float(np.mean(np.abs(column_corr(z, xhat - truth)))))
    if not indices:
        raise ConfigurationError("工具变量集合为空")
    return RelevanceExclusionSummary(
        learner_indices=indices, relevance=relevance, exclusion=exclusion, stage=stage,
    )


# ==================== 完整诊断流程 ====================
class CorrelationComparison(BaseModel):
    """变换前后 |误差-残差相关| 的描述统计与配对 t 检验"""
    model_config = ConfigDict(frozen=True)

    before_min: float
    before_max: float
    before_mean: float
    before_sd: float
    after_min: float
    after_max: float
    after_mean: float
    after_sd: float
    t_statistic: Optional[float] = None
    t_p_value: Optional[float] = None


def compare_correlations(before: np.ndarray, after: np.ndarray) -> CorrelationComparison:
    """
    配对比较 |Corr| 变换前后

    Args:
        before: 每个配对的变换前 |相关|
        after: 同一配对的变换后 |相关|
    """
    before = np.abs(np.asarray(before, dtype=float))
    after = np.abs(np.asarray(after, dtype=float))
    t_stat, t_p = None, None
    if before.size >= 2 and np.any(before != after):
        test = stats.ttest_rel(before, after)
        t_stat, t_p = float(test.statistic), float(test.pvalue)

    def sd(a):
        return float(np.std(a, ddof=1)) if a.size > 1 else 0.0

    return CorrelationComparison(
        before_min=float(before.min()), before_max=float(before.max()),
        before_mean=float(before.mean()), before_sd=sd(before),
        after_min=float(after.min()), after_max=float(after.max()),
        after_mean=float(after.mean()), after_sd=sd(after),
        t_statistic=t_stat, t_p_value=t_p,
    )


class DiagnosticReport(BaseModel):
    """一次诊断的完整输出"""
    model_config = ConfigDict(frozen=True)

    result: DiagnosticResult
    comparison: CorrelationComparison
    alpha: float
    rejected: bool
    n_train: int
    n_test: int
    n_diagnostic: int

    def summary(self, max_pairs: Optional[int] = None) -> dict:
        max_pairs = diag_settings.max_pairs_in_report if max_pairs is None else max_pairs
        data = self.model_dump(exclude={"result"})
        data["result"] = self.result.summary(max_pairs)
        return data


class KFoldDiagnosticReport(BaseModel):
    """K 折诊断与 Fisher 合并"""
    model_config = ConfigDict(frozen=True)

    folds: list[DiagnosticReport]
    combined_p_value: float
    alpha: float
    rejected: bool


def diagnose_partition(
    fit_pool: SampleSet,
    d_diagnostic: SampleSet,
    spec: SecondPhaseSpec,
    learner_config: LearnerConfig,
    rng: RngStream,
    permutations: Optional[int] = None,
    alpha: Optional[float] = None,
    test_fraction: Optional[float] = None,
    lambda_mode: LambdaMode = "standard",
    n_jobs: Optional[int] = 1,
) -> DiagnosticReport:
    """
    给定 D_diagnostic 的诊断

    Args:
        fit_pool: 有标签数据去掉 D_diagnostic
        d_diagnostic: 诊断分区
        spec: 第二阶段设定
        learner_config: 集成超参数
        rng: 随机数流；(0,) 拆分训练/测试，(1,) 训练，(2,) 置换
        permutations: 置换次数
        alpha: 显著性水平
        test_fraction: fit_pool 中用于估计 λ 的比例
        lambda_mode: standard / modified
        n_jobs: 并行度

    Returns:
        DiagnosticReport
    """
    alpha = diag_settings.alpha if alpha is None else alpha
    test_fraction = diag_settings.test_fraction if test_fraction is None else test_fraction
    n_test = max(3, int(round(fit_pool.n * test_fraction)))
    d_test, d_train = split_by_size(fit_pool, n_test, rng.child(0))
    model = train_ensemble(d_train, learner_config, rng.child(1), n_jobs=n_jobs)

    r = diagnostic_residuals(fit_pool, d_diagnostic, spec)
    x_diag = d_diagnostic.require_labels("D_diagnostic")
    pred_test = predict_learners(model, d_test)
    pred_diag = predict_learners(model, d_diagnostic)
    residuals, beta_hat = None, None
    if lambda_mode == "modified":
        residuals, beta_hat = modified_lambda_inputs(d_train, d_test, spec)
    instruments = diagnostic_instruments(pred_test, d_test.labels, pred_diag, residuals, beta_hat)
    result = permutation_test(instruments, x_diag, r, permutations, rng.child(2))

    before = column_corr(pred_diag.values - x_diag[:, None], r)
    after = np.array([pc.corr for pc in result.pair_correlations])
    paired_before = np.array([before[pc.j] for pc in result.pair_correlations])
    comparison = compare_correlations(paired_before, after)
    logger.info(
        f"🔍 诊断完成: TS={result.ts_observed:.4f}, p={result.p_value:.4f}, "
        f"|corr| 变换前 {comparison.before_mean:.4f} → 变换后 {comparison.after_mean:.4f}"
    )
    return DiagnosticReport(
        result=result,
        comparison=comparison,
        alpha=alpha,
        rejected=result.p_value < alpha,
        n_train=d_train.n,
        n_test=d_test.n,
        n_diagnostic=d_diagnostic.n,
    )


def run_diagnostic(
    pool: SampleSet,
    spec: SecondPhaseSpec,
    learner_config: LearnerConfig,
    rng: RngStream,
    diagnostic_fraction: Optional[float] = None,
    **kwargs,
) -> DiagnosticReport:
    """预留随机 D_diagnostic 后执行诊断"""
    fit_pool, d_diagnostic = holdout_diagnostic(pool, rng.child(0), diagnostic_fraction)
    return diagnose_partition(fit_pool, d_diagnostic, spec, learner_config, rng.child(1), **kwargs)


def run_diagnostic_kfold(
    pool: SampleSet,
    spec: SecondPhaseSpec,
    learner_config: LearnerConfig,
    k: int,
    rng: RngStream,
    alpha: Optional[float] = None,
    permutations: Optional[int] = None,
    **kwargs,
) -> KFoldDiagnosticReport:
    """
    D_diagnostic 在 K 折间轮换，p 值用 Fisher 方法合并

    Returns:
        KFoldDiagnosticReport
    """
    alpha = diag_settings.alpha if alpha is None else alpha
    assignment = partition_labeled(pool, k, rng.child(0))
    reports = []
    for fold in range(1, k + 1):
        fit_pool, d_diagnostic = split_fold(pool, assignment, fold)
        reports.append(diagnose_partition(
            fit_pool, d_diagnostic, spec, learner_config, rng.child(1, fold),
            permutations=permutations, alpha=alpha, **kwargs,
        ))
    combined = fisher_combine([r.result.p_value for r in reports], permutations)
    return KFoldDiagnosticReport(folds=reports, combined_p_value=combined, alpha=alpha, rejected=combined < alpha)
