"""
EnsembleIV 核心流程

1. λ̂ 估计: λ̂ = Cov(Z, e)/Cov(X̂, e) · σ_X̂/σ_Z，全部在 D_test 上用 n−1 分母计算
2. 工具变量变换: Z̃ = σ_X̂·Z − λ̂·σ_Z·X̂（σ 沿用 D_test 的估计）
3. 工具变量选择: top_n / pca / lasso
4. 逐学习器 2SLS（线性）或 2SRI（logistic），对成功的学习器取平均
5. 交叉拟合: K 折轮换 D_test，对各折估计取平均
"""
import logging
from typing import Literal, Optional, Sequence

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict
from pydantic_settings import BaseSettings

from dataset import partition_labeled, split_fold
from ensemble import EnsembleModel, LearnerConfig, predict_learners, train_ensemble
from errors import (
    ConfigurationError, ConvergenceError, DegenerateLambdaError,
    EstimationError, EstimationFailureError, FoldEstimationError, ShapeError,
)
from models import (
    CoefficientEstimate, LambdaEstimate, LearnerPredictionMatrix, PartitionedDataset,
    RngStream, SampleSet, SecondPhaseSpec, SelectedInstruments, SelectionConfig,
    TransformedInstrument,
)
from regression import fit_2sls, fit_2sri, fit_ols, second_phase_design
from tasks import run_parallel
from utils import column_corr, standardize_columns

logger = logging.getLogger(__name__)

LambdaMode = Literal["standard", "modified"]


class IVSettings(BaseSettings):
    """工具变量流程配置"""
    selection_method: str = "pca"
    selection_n: int = 3
    lasso_alpha: float = 0.05
    lasso_penalty_constant: float = 1.1
    lasso_tol: float = 1e-8
    lasso_max_sweeps: int = 10000
    degeneracy_tol: float = 1e-12  # |Cov(X̂,e)| < tol·σ_X̂·σ_e 视为退化
    pca_rank_tol: float = 1e-10

    class Config:
        env_file = ".env"
        env_prefix = "IV_"
        extra = "ignore"


iv_settings = IVSettings()


def load_iv_settings(env_file: Optional[str] = None) -> IVSettings:
    """从配置文件重新读取工具变量配置（--config），缺省读取 .env"""
    global iv_settings
    iv_settings = IVSettings(_env_file=env_file or ".env")
    return iv_settings


def default_selection() -> SelectionConfig:
    """由 IVSettings 构造默认选择配置"""
    return SelectionConfig(
        method=iv_settings.selection_method,
        n=iv_settings.selection_n,
        lasso_alpha=iv_settings.lasso_alpha,
        lasso_penalty_constant=iv_settings.lasso_penalty_constant,
    )


# ==================== λ 估计 ====================
class _LambdaParts(BaseModel):
    """一个内生学习器对多个候选的 λ̂ 组成部分（向量化）"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lambda_hat: np.ndarray
    cov_z_e: np.ndarray
    cov_xhat_e: float
    sigma_xhat: float
    sigma_z: np.ndarray
    valid: np.ndarray
    zero_error: bool


def _lambda_parts(
    xhat: np.ndarray,
    candidates: np.ndarray,
    truth: np.ndarray,
    residuals: Optional[np.ndarray] = None,
    beta_hat: Optional[float] = None,
) -> _LambdaParts:
    n = xhat.shape[0]
    e = xhat - truth
    xc = xhat - xhat.mean()
    ec = e - e.mean()
    zc = candidates - candidates.mean(axis=0)
    sigma_xhat = float(np.sqrt(xc @ xc / (n - 1)))
    sigma_z = np.sqrt(np.sum(zc ** 2, axis=0) / (n - 1))
    sigma_e = float(np.sqrt(ec @ ec / (n - 1)))
    cov_z_e = zc.T @ ec / (n - 1)
    cov_xhat_e = float(xc @ ec / (n - 1))

    if residuals is None:
        numerator = cov_z_e
        denominator = cov_xhat_e
        scale = sigma_e
    else:
        rc = residuals - residuals.mean()
        numerator = zc.T @ rc / (n - 1) - beta_hat * cov_z_e
        denominator = float(xc @ rc / (n - 1)) - beta_hat * cov_xhat_e
        scale = max(sigma_e, float(np.sqrt(rc @ rc / (n - 1))))

    valid = (sigma_z > 0) & (sigma_xhat > 0)
    zero_error = residuals is None and sigma_e == 0.0
    lam = np.zeros_like(sigma_z)
    if zero_error:
        # D_test 上没有测量误差：排他性平凡成立
        pass
    elif abs(denominator) < iv_settings.degeneracy_tol * sigma_xhat * scale or scale == 0.0:
        valid = np.zeros_like(valid)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(valid, numerator / denominator * sigma_xhat / np.where(valid, sigma_z, 1.0), 0.0)
    return _LambdaParts(
        lambda_hat=lam, cov_z_e=cov_z_e, cov_xhat_e=cov_xhat_e,
        sigma_xhat=sigma_xhat, sigma_z=sigma_z, valid=valid, zero_error=zero_error,
    )


def _check_lambda_inputs(*vectors: np.ndarray) -> list[np.ndarray]:
    arrays = [np.asarray(v, dtype=float).reshape(-1) for v in vectors]
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ShapeError("λ 估计的输入向量长度必须一致")
    if n < 3:
        raise ConfigurationError(f"λ 估计至少需要 3 个样本，当前 {n}")
    return arrays


def _single_lambda(parts: _LambdaParts, pair: tuple[int, int], source: str) -> LambdaEstimate:
    if parts.sigma_xhat == 0.0 or parts.sigma_z[0] == 0.0:
        raise DegenerateLambdaError(pair, f"学习器对 {pair} 的预测方差为 0")
    if not parts.valid[0]:
        raise DegenerateLambdaError(pair)
    return LambdaEstimate(
        lambda_hat=float(parts.lambda_hat[0]),
        cov_z_e=float(parts.cov_z_e[0]),
        cov_xhat_e=parts.cov_xhat_e,
        sigma_xhat=parts.sigma_xhat,
        sigma_z=float(parts.sigma_z[0]),
        source=source,
        pair=pair,
        zero_error=parts.zero_error,
    )


def estimate_lambda(
    pred_i_test: np.ndarray,
    pred_j_test: np.ndarray,
    x_test: np.ndarray,
    pair: tuple[int, int] = (0, 1),
) -> LambdaEstimate:
    """
    在 D_test 上估计 λ̂

    Args:
        pred_i_test: 内生学习器 i 的预测 X̂
        pred_j_test: 候选学习器 j 的预测 Z
        x_test: 真实 X
        pair: (i, j)

    Returns:
        LambdaEstimate: 标准来源

    Raises:
        DegenerateLambdaError: 预测方差为 0 或 |Cov(X̂,e)| 过小
    """
    xhat, z, x = _check_lambda_inputs(pred_i_test, pred_j_test, x_test)
    parts = _lambda_parts(xhat, z.reshape(-1, 1), x)
    return _single_lambda(parts, pair, "standard")


def estimate_lambda_modified(
    pred_i_test: np.ndarray,
    pred_j_test: np.ndarray,
    x_test: np.ndarray,
    residuals_test: np.ndarray,
    beta_hat_label: float,
    pair: tuple[int, int] = (0, 1),
) -> LambdaEstimate:
    """
    考虑外围特征相关的修正 λ̂

    λ̂ = [Cov(Z, ε̂) − β̂·Cov(Z, e)] / [Cov(X̂, ε̂) − β̂·Cov(X̂, e)] · σ_X̂/σ_Z

    Args:
        residuals_test: D_train 上无偏 OLS 应用到 D_test 的残差 ε̂
        beta_hat_label: D_train ∪ D_test 上无偏回归的 β̂
    """
    xhat, z, x, r = _check_lambda_inputs(pred_i_test, pred_j_test, x_test, residuals_test)
    parts = _lambda_parts(xhat, z.reshape(-1, 1), x, residuals=r, beta_hat=float(beta_hat_label))
    return _single_lambda(parts, pair, "modified")


def transform_instrument(
    lambda_estimate: LambdaEstimate,
    pred_i_unlabel: np.ndarray,
    pred_j_unlabel: np.ndarray,
) -> TransformedInstrument:
    """
    Z̃ = σ_X̂·Z − λ̂·σ_Z·X̂

    Args:
        lambda_estimate: λ̂ 及 D_test 上的 σ
        pred_i_unlabel: 内生学习器在目标样本上的预测
        pred_j_unlabel: 候选学习器在目标样本上的预测

    Returns:
        TransformedInstrument
    """
    xhat = np.asarray(pred_i_unlabel, dtype=float).reshape(-1)
    z = np.asarray(pred_j_unlabel, dtype=float).reshape(-1)
    if xhat.shape[0] != z.shape[0]:
        raise ShapeError(f"变换输入长度不一致: {xhat.shape[0]} vs {z.shape[0]}")
    lam = lambda_estimate
    values = lam.sigma_xhat * z - lam.lambda_hat * lam.sigma_z * xhat
    return TransformedInstrument(
        values=values,
        lambda_estimate=lam,
        endogenous_index=lam.pair[0],
        instrument_index=lam.pair[1],
    )


# ==================== LASSO ====================
def lasso_objective(y: np.ndarray, X: np.ndarray, gamma: np.ndarray, delta: float) -> float:
    """(1/n)‖y − Xγ‖² + δ‖γ‖₁"""
    resid = y - X @ gamma
    return float(resid @ resid / y.shape[0] + delta * np.sum(np.abs(gamma)))


def _soft_threshold(value: float, threshold: float) -> float:
    return float(np.sign(value) * max(abs(value) - threshold, 0.0))


def lasso_solve(
    y: np.ndarray,
    X: np.ndarray,
    delta: float,
    max_sweeps: Optional[int] = None,
    tol: Optional[float] = None,
) -> np.ndarray:
    """
    循环坐标下降求解 LASSO

    目标函数 (1/n)‖y − Xγ‖² + δ‖γ‖₁，坐标更新
    γⱼ = S(cⱼ − Σ_{k≠j} Gⱼₖγₖ, δ/2) / Gⱼⱼ，其中 G = X'X/n, c = X'y/n。

    Args:
        y: 因变量
        X: n×p 标准化候选矩阵
        delta: 惩罚权重 δ ≥ 0
        max_sweeps: 最大扫描轮数
        tol: 系数最大变化量收敛阈值

    Returns:
        np.ndarray: 系数 γ
    """
    if delta < 0:
        raise ConfigurationError(f"惩罚权重必须 ≥ 0，当前 {delta}")
    max_sweeps = max_sweeps if max_sweeps is not None else iv_settings.lasso_max_sweeps
    tol = tol if tol is not None else iv_settings.lasso_tol
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    gram = X.T @ X / n
    corr = X.T @ y / n
    gamma = np.zeros(p)
    threshold = delta / 2.0
    trace: list[float] = []
    for _ in range(max_sweeps):
        max_change = 0.0
        for j in range(p):
            if gram[j, j] <= 0.0:
                continue
            rho = corr[j] - gram[j] @ gamma + gram[j, j] * gamma[j]
            new = _soft_threshold(rho, threshold) / gram[j, j]
            max_change = max(max_change, abs(new - gamma[j]))
            gamma[j] = new
        trace.append(max_change)
        if max_change < tol:
            return gamma
    raise ConvergenceError(f"LASSO 在 {max_sweeps} 轮内未收敛", trace[-10:])


def belloni_penalty(sigma: float, n: int, p: int, alpha: float, constant: float) -> float:
    """δ = c·σ̂·√(2·log(2p/α)/n)"""
    return constant * sigma * float(np.sqrt(2.0 * np.log(2.0 * p / alpha) / n))


# ==================== 工具变量选择 ====================
def _labels(indices: Sequence[int]) -> list[str]:
    return [f"z{j}" for j in indices]


def _select_top_n(endogenous, candidates, indices, n) -> SelectedInstruments:
    corr = np.abs(column_corr(candidates, endogenous))
    order = np.lexsort((np.asarray(indices), -corr))[:n]
    chosen = [indices[k] for k in order]
    return SelectedInstruments(
        columns=candidates[:, order], labels=_labels(chosen),
        method="top_n", source_indices=chosen,
    )


def _select_pca(candidates, indices, n) -> SelectedInstruments:
    centered = candidates - candidates.mean(axis=0)
    cov = centered.T @ centered / (candidates.shape[0] - 1)
    evals, evecs = scipy.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[0] <= 0.0:
        raise EstimationError("候选工具变量全部为常数，无法做主成分")
    rank = int(np.sum(evals > iv_settings.pca_rank_tol * evals[0]))
    warnings = []
    k = min(n, rank)
    if n > rank:
        warnings.append(f"候选协方差矩阵秩为 {rank}，只返回 {k} 个主成分")
        logger.warning(f"⚠️ PCA 秩亏: 请求 {n} 个主成分，秩 {rank}")
    vecs = evecs[:, :k].copy()
    # 符号约定：绝对值最大的载荷为正
    for c in range(k):
        if vecs[np.argmax(np.abs(vecs[:, c])), c] < 0:
            vecs[:, c] = -vecs[:, c]
    scores = centered @ vecs / np.sqrt(evals[:k])
    ratio = (evals[:k] / np.sum(np.clip(evals, 0.0, None))).tolist()
    return SelectedInstruments(
        columns=scores, labels=[f"pc{c + 1}" for c in range(k)],
        method="pca", source_indices=list(indices),
        warnings=warnings, explained_variance_ratio=ratio,
    )


def _select_lasso(endogenous, candidates, indices, config: SelectionConfig) -> SelectedInstruments:
    standardized, keep = standardize_columns(candidates)
    kept = np.flatnonzero(keep)
    y = endogenous - endogenous.mean()
    n = y.shape[0]
    X = standardized[:, kept]
    gamma = np.zeros(kept.shape[0])
    if kept.size:
        if config.lasso_penalty is not None:
            gamma = lasso_solve(y, X, config.lasso_penalty)
        else:
            sigma = float(np.std(y, ddof=1))
            # σ̂ 由残差迭代两次
            for _ in range(3):
                delta = belloni_penalty(sigma, n, kept.size, config.lasso_alpha, config.lasso_penalty_constant)
                gamma = lasso_solve(y, X, delta)
                resid = y - X @ gamma
                sigma = float(np.sqrt(resid @ resid / n))
    chosen_pos = kept[np.abs(gamma) > 0]
    if chosen_pos.size == 0:
        message = "LASSO 未选中任何候选，退回 top-1"
        logger.warning(f"⚠️ {message}")
        top = _select_top_n(endogenous, candidates, indices, 1)
        return top.model_copy(update={"method": "lasso", "fallback": True, "warnings": [message]})
    chosen = [indices[k] for k in chosen_pos]
    order = np.argsort(chosen, kind="stable")
    return SelectedInstruments(
        columns=candidates[:, chosen_pos[order]],
        labels=_labels([chosen[k] for k in order]),
        method="lasso",
        source_indices=[chosen[k] for k in order],
    )


def _select_matrix(
    endogenous: np.ndarray,
    candidates: np.ndarray,
    indices: Sequence[int],
    config: SelectionConfig,
) -> SelectedInstruments:
    if candidates.shape[1] < 1:
        raise ConfigurationError("至少需要 1 个候选工具变量")
    if config.method != "lasso" and config.n > candidates.shape[1]:
        raise ConfigurationError(f"n={config.n} 超过候选个数 {candidates.shape[1]}")
    indices = list(indices)
    if config.method == "top_n":
        return _select_top_n(endogenous, candidates, indices, config.n)
    if config.method == "pca":
        return _select_pca(candidates, indices, config.n)
    return _select_lasso(endogenous, candidates, indices, config)


def select_instruments(
    endogenous_unlabel: np.ndarray,
    candidates: Sequence[TransformedInstrument],
    config: Optional[SelectionConfig] = None,
) -> SelectedInstruments:
    """
    从变换后的候选中选择工具变量

    Args:
        endogenous_unlabel: 内生学习器在目标样本上的预测
        candidates: 变换后的候选工具变量
        config: 选择配置

    Returns:
        SelectedInstruments: top_n 按 |相关| 降序（并列按 j 升序）；pca 为主成分得分；
        lasso 为非零系数候选（按 j 升序），空集时退回 top-1
    """
    config = config or default_selection()
    if not candidates:
        raise ConfigurationError("至少需要 1 个候选工具变量")
    endogenous = np.asarray(endogenous_unlabel, dtype=float).reshape(-1)
    matrix = np.column_stack([c.values for c in candidates])
    if matrix.shape[0] != endogenous.shape[0]:
        raise ShapeError("候选工具变量与内生变量长度不一致")
    return _select_matrix(endogenous, matrix, [c.instrument_index for c in candidates], config)


# ==================== EnsembleIV ====================
class _PipelineInputs(BaseModel):
    """逐学习器估计共享的只读输入"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pred_test: np.ndarray
    x_test: np.ndarray
    pred_target: np.ndarray
    selection: SelectionConfig
    residuals_test: Optional[np.ndarray] = None
    beta_hat: Optional[float] = None


def _transformed_matrix(i: int, inputs: _PipelineInputs) -> tuple[np.ndarray, list[int], int]:
    """学习器 i 的全部有效 Z̃ 列（向量化），返回 (矩阵, 候选编号, 退化对数)"""
    pool = range(inputs.pred_test.shape[1])
    cand = [j for j in pool if j != i]
    if not cand:
        raise ConfigurationError(f"学习器 {i} 没有候选工具变量")
    parts = _lambda_parts(
        inputs.pred_test[:, i], inputs.pred_test[:, cand], inputs.x_test,
        residuals=inputs.residuals_test, beta_hat=inputs.beta_hat,
    )
    ok = np.flatnonzero(parts.valid)
    if ok.size == 0:
        raise DegenerateLambdaError((i, -1), f"学习器 {i} 的所有 λ 对均退化")
    target = inputs.pred_target
    scale = parts.lambda_hat[ok] * parts.sigma_z[ok]
    matrix = parts.sigma_xhat * target[:, [cand[k] for k in ok]] - target[:, [i]] * scale[None, :]
    return matrix, [cand[k] for k in ok], len(cand) - ok.size


def transformed_candidates(
    i: int,
    pred_test: LearnerPredictionMatrix,
    x_test: np.ndarray,
    pred_target: LearnerPredictionMatrix,
    residuals_test: Optional[np.ndarray] = None,
    beta_hat: Optional[float] = None,
) -> list[TransformedInstrument]:
    """
    学习器 i 的全部 Z̃⁽ʲ⁾（j≠i），λ 在 pred_test 上估计，变换应用到 pred_target

    退化的 (i, j) 对被剔除。
    """
    x_test = np.asarray(x_test, dtype=float).reshape(-1)
    cand = [j for j in range(pred_test.n_learners) if j != i]
    parts = _lambda_parts(
        pred_test.values[:, i], pred_test.values[:, cand], x_test,
        residuals=None if residuals_test is None else np.asarray(residuals_test, dtype=float),
        beta_hat=beta_hat,
    )
    source = "standard" if residuals_test is None else "modified"
    out = []
    for k, j in enumerate(cand):
        if not parts.valid[k]:
            continue
        lam = LambdaEstimate(
            lambda_hat=float(parts.lambda_hat[k]),
            cov_z_e=float(parts.cov_z_e[k]),
            cov_xhat_e=parts.cov_xhat_e,
            sigma_xhat=parts.sigma_xhat,
            sigma_z=float(parts.sigma_z[k]),
            source=source,
            pair=(i, j),
            zero_error=parts.zero_error,
        )
        out.append(transform_instrument(lam, pred_target.values[:, i], pred_target.values[:, j]))
    return out


def learner_instruments(i: int, inputs: _PipelineInputs) -> tuple[SelectedInstruments, int]:
    """
    学习器 i 的变换 + 选择

    退化对剔除后候选数少于 n 时，n 自动收缩到候选数。

    Returns:
        (SelectedInstruments, 退化对数)
    """
    matrix, indices, degenerate = _transformed_matrix(i, inputs)
    config = inputs.selection
    if config.method != "lasso" and config.n > len(indices):
        config = config.model_copy(update={"n": len(indices)})
    return _select_matrix(inputs.pred_target[:, i], matrix, indices, config), degenerate


def build_instrument_sets(
    pred_test: LearnerPredictionMatrix,
    x_test: np.ndarray,
    pred_target: LearnerPredictionMatrix,
    selection: Optional[SelectionConfig] = None,
    learners: Optional[Sequence[int]] = None,
) -> dict[int, SelectedInstruments]:
    """
    所有学习器选出的工具变量集合（用于相关性/排他性描述统计）

    λ 全部退化的学习器不出现在结果中。
    """
    inputs = _PipelineInputs(
        pred_test=pred_test.values, x_test=np.asarray(x_test, dtype=float),
        pred_target=pred_target.values, selection=selection or default_selection(),
    )
    out = {}
    for i in (learners if learners is not None else range(pred_test.n_learners)):
        try:
            out[i], _ = learner_instruments(i, inputs)
        except EstimationError as e:
            logger.debug(f"学习器 {i} 无可用工具变量: {e}")
    return out


def ensembleiv_from_predictions(
    pred_test: LearnerPredictionMatrix,
    x_test: np.ndarray,
    pred_unlabel: LearnerPredictionMatrix,
    d_unlabel: SampleSet,
    spec: SecondPhaseSpec,
    selection: Optional[SelectionConfig] = None,
    residuals_test: Optional[np.ndarray] = None,
    beta_hat: Optional[float] = None,
    learners: Optional[Sequence[int]] = None,
    n_jobs: Optional[int] = 1,
) -> CoefficientEstimate:
    """
    由预测矩阵计算 EnsembleIV 估计

    对每个内生学习器 i：变换所有 j≠i、选择工具变量、在目标样本上做 2SLS/2SRI；
    λ 全部退化或 IV 回归失败的学习器被跳过；点估计为成功学习器的平均。

    Args:
        pred_test: D_test 上的预测矩阵
        x_test: D_test 上的真实 X
        pred_unlabel: 目标样本（D_unlabel）上的预测矩阵
        d_unlabel: 目标样本（提供 Y 和 W）
        spec: 第二阶段设定
        selection: 工具变量选择配置
        residuals_test: 给出时使用修正 λ（需同时给出 beta_hat）
        beta_hat: 有标签数据上无偏回归的 β̂
        learners: 参与估计的内生学习器编号，缺省为全部
        n_jobs: 学习器并行度（线程）

    Returns:
        CoefficientEstimate: se 为逐学习器解析标准误的平均，仅作参考，推断请用 bootstrap
    """
    if pred_test.n_learners < 2 or pred_unlabel.n_learners != pred_test.n_learners:
        raise ConfigurationError("EnsembleIV 需要 M ≥ 2 且两个预测矩阵列数一致")
    if pred_unlabel.n != d_unlabel.n:
        raise ShapeError("目标样本预测矩阵行数与 d_unlabel 不一致")
    x_test = np.asarray(x_test, dtype=float).reshape(-1)
    if x_test.shape[0] != pred_test.n:
        raise ShapeError("x_test 长度与 D_test 预测矩阵行数不一致")
    if (residuals_test is None) != (beta_hat is None):
        raise ConfigurationError("修正 λ 需要同时给出 residuals_test 和 beta_hat")
    spec.check_outcome(d_unlabel.outcomes)
    selection = selection or default_selection()

    inputs = _PipelineInputs(
        pred_test=pred_test.values,
        x_test=x_test,
        pred_target=pred_unlabel.values,
        selection=selection,
        residuals_test=None if residuals_test is None else np.asarray(residuals_test, dtype=float),
        beta_hat=beta_hat,
    )
    fit = fit_2sri if spec.family == "logistic" else fit_2sls

    def estimate_learner(i: int) -> tuple[Optional[CoefficientEstimate], str, int, bool]:
        try:
            selected, degenerate = learner_instruments(i, inputs)
            result = fit(
                d_unlabel.outcomes, pred_unlabel.values[:, i], selected.columns,
                controls=d_unlabel.controls, intercept=spec.intercept,
                endogenous_name=spec.mlv_name, control_names=spec.control_names,
            )
            return result, "", degenerate, selected.fallback
        except EstimationError as e:
            return None, f"{type(e).__name__}: {e}", 0, False

    order = list(learners) if learners is not None else list(range(pred_test.n_learners))
    outcomes = run_parallel(estimate_learner, order, n_jobs=n_jobs, prefer="threads")

    fits = [o[0] for o in outcomes if o[0] is not None]
    skipped = {i: o[1] for i, o in zip(order, outcomes) if o[0] is None}
    if not fits:
        raise EstimationFailureError(f"所有 {len(order)} 个学习器都被跳过，例如: {next(iter(skipped.values()))}")
    if skipped:
        logger.warning(f"⚠️ EnsembleIV 跳过 {len(skipped)}/{len(order)} 个学习器")

    points = np.array([f.point for f in fits])
    ses = np.array([f.se for f in fits])
    names = fits[0].names
    mlv_col = names.index(spec.mlv_name)
    f_stats = [f.diagnostics.get("first_stage_f") for f in fits]
    finite_f = [f for f in f_stats if f is not None and np.isfinite(f)]
    modified = residuals_test is not None
    return CoefficientEstimate(
        names=names,
        point=points.mean(axis=0).tolist(),
        se=ses.mean(axis=0).tolist(),
        estimator="extended" if modified else "ensembleiv",
        diagnostics={
            "n_learners": len(order),
            "n_used": len(fits),
            "skipped": len(skipped),
            "skipped_fraction": len(skipped) / len(order),
            "skip_reasons": sorted(set(skipped.values()))[:5],
            "degenerate_pairs": int(sum(o[2] for o in outcomes)),
            "lasso_fallbacks": int(sum(o[3] for o in outcomes)),
            "mean_first_stage_f": float(np.mean(finite_f)) if finite_f else None,
            "learner_mlv": points[:, mlv_col].tolist(),
            "selection": selection.method,
            "lambda_source": "modified" if modified else "standard",
            "se_note": "逐学习器解析标准误的平均，推断请使用 bootstrap",
        },
    )


def modified_lambda_inputs(
    d_train: SampleSet,
    d_test: SampleSet,
    spec: SecondPhaseSpec,
) -> tuple[np.ndarray, float]:
    """
    修正 λ 所需的 (ε̂_test, β̂)

    ε̂ 为 D_train 上无偏 OLS 在 D_test 上的残差；β̂ 来自 D_train ∪ D_test 上的无偏 OLS。
    """
    if spec.family != "linear":
        raise ConfigurationError("修正 λ 只支持线性第二阶段")
    train_design = second_phase_design(d_train.require_labels("D_train"), d_train.controls, spec)
    train_fit = fit_ols(train_design, d_train.outcomes)
    test_design = second_phase_design(d_test.require_labels("D_test"), d_test.controls, spec)
    residuals = d_test.outcomes - train_fit.predict(test_design)
    pooled = SampleSet.concat([d_train, d_test])
    pooled_fit = fit_ols(second_phase_design(pooled.labels, pooled.controls, spec), pooled.outcomes)
    return residuals, pooled_fit.coef(spec.mlv_name)


def ensembleiv(
    dataset: PartitionedDataset,
    model: EnsembleModel,
    spec: SecondPhaseSpec,
    selection: Optional[SelectionConfig] = None,
    lambda_mode: LambdaMode = "standard",
    n_jobs: Optional[int] = 1,
) -> CoefficientEstimate:
    """
    EnsembleIV：用训练好的集成模型在 D_test 上估计 λ，在 D_unlabel 上估计第二阶段

    Args:
        dataset: 分区数据集
        model: 在 D_train 上训练好的集成模型
        spec: 第二阶段设定
        selection: 工具变量选择配置
        lambda_mode: standard 或 modified（修正 λ，仅线性）
        n_jobs: 学习器并行度

    Returns:
        CoefficientEstimate
    """
    pred_test = predict_learners(model, dataset.d_test)
    pred_unlabel = predict_learners(model, dataset.d_unlabel)
    residuals, beta_hat = None, None
    if lambda_mode == "modified":
        residuals, beta_hat = modified_lambda_inputs(dataset.d_train, dataset.d_test, spec)
    return ensembleiv_from_predictions(
        pred_test, dataset.d_test.require_labels("D_test"), pred_unlabel, dataset.d_unlabel,
        spec, selection, residuals_test=residuals, beta_hat=beta_hat, n_jobs=n_jobs,
    )


# ==================== 交叉拟合 ====================
class CrossFitFold(BaseModel):
    """一折的训练/测试数据与训练好的模型"""
    model_config = ConfigDict(frozen=True)

    index: int
    train: SampleSet
    test: SampleSet
    model: EnsembleModel


def plan_crossfit(
    pool: SampleSet,
    k: int,
    learner_config: LearnerConfig,
    rng: RngStream,
    n_jobs: Optional[int] = 1,
) -> list[CrossFitFold]:
    """
    划分 K 折并在每折的补集上训练集成模型

    同一次重复中的多个交叉拟合估计量可以共享这个计划。

    Args:
        pool: 有标签样本池
        k: 折数
        learner_config: 集成超参数
        rng: 随机数流；(0,) 用于分折，(1, k) 用于第 k 折训练
        n_jobs: bagging 并行度

    Returns:
        list[CrossFitFold]
    """
    assignment = partition_labeled(pool, k, rng.child(0))
    folds = []
    for fold in range(1, k + 1):
        train, test = split_fold(pool, assignment, fold)
        model = train_ensemble(train, learner_config, rng.child(1, fold), n_jobs=n_jobs)
        folds.append(CrossFitFold(index=fold, train=train, test=test, model=model))
    return folds


def average_estimates(
    estimates: Sequence[CoefficientEstimate],
    estimator: str,
    extra: Optional[dict] = None,
) -> CoefficientEstimate:
    """对多个估计取算术平均（点估计和标准误）"""
    points = np.array([e.point for e in estimates])
    ses = np.array([e.se for e in estimates])
    return CoefficientEstimate(
        names=estimates[0].names,
        point=points.mean(axis=0).tolist(),
        se=ses.mean(axis=0).tolist(),
        estimator=estimator,
        diagnostics={"fold_points": points.tolist(), **(extra or {})},
    )


def ensembleiv_crossfit(
    pool: SampleSet,
    d_unlabel: SampleSet,
    k: int,
    spec: SecondPhaseSpec,
    selection: Optional[SelectionConfig],
    learner_config: LearnerConfig,
    rng: RngStream,
    lambda_mode: LambdaMode = "standard",
    n_jobs: Optional[int] = 1,
    plan: Optional[list[CrossFitFold]] = None,
) -> CoefficientEstimate:
    """
    交叉拟合 EnsembleIV：β̂_CF = (1/K)·Σₖ β̂ₖ

    Args:
        pool: 有标签样本池
        d_unlabel: 无标签样本
        k: 折数
        spec: 第二阶段设定
        selection: 工具变量选择配置
        learner_config: 集成超参数
        rng: 随机数流
        lambda_mode: standard / modified
        n_jobs: 并行度
        plan: 预先训练好的折计划（共享模型时使用）

    Returns:
        CoefficientEstimate

    Raises:
        FoldEstimationError: 某一折所有学习器都失败
    """
    plan = plan or plan_crossfit(pool, k, learner_config, rng, n_jobs=n_jobs)
    estimates = []
    for fold in plan:
        dataset = PartitionedDataset(d_train=fold.train, d_test=fold.test, d_unlabel=d_unlabel)
        try:
            estimates.append(ensembleiv(dataset, fold.model, spec, selection, lambda_mode, n_jobs=n_jobs))
        except EstimationFailureError as e:
            raise FoldEstimationError(fold.index, e) from e
    skipped = float(np.mean([e.diagnostics["skipped_fraction"] for e in estimates]))
    return average_estimates(
        estimates,
        "extended" if lambda_mode == "modified" else "ensembleiv_cf",
        {"folds": len(plan), "skipped_fraction": skipped, "crossfit": True},
    )
