"""
第二阶段估计引擎 - OLS、IRLS logistic、2SLS、2SRI（控制函数）与分区 bootstrap
"""
import logging
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from pydantic_settings import BaseSettings
from scipy.special import expit

from dataset import resample_partitions
from errors import (
    BootstrapDegeneracyError, ConfigurationError, ConvergenceError,
    EstimationError, ShapeError, SingularDesignError,
)
from models import CoefficientEstimate, DesignMatrix, PartitionedDataset, RngStream, SecondPhaseSpec
from tasks import run_parallel

logger = logging.getLogger(__name__)


class RegressionSettings(BaseSettings):
    """估计引擎数值配置"""
    rank_tol: float = 1e-10  # 相对最大对角元的秩容差
    irls_tol: float = 1e-8
    irls_max_iter: int = 100
    separation_norm: float = 1e4  # ‖β‖ 超过即视为完全分离
    residual_drop_tol: float = 1e-10  # 2SRI 一阶段残差视为 0 的相对阈值

    class Config:
        env_file = ".env"
        env_prefix = "REGRESSION_"
        extra = "ignore"


regression_settings = RegressionSettings()


def load_regression_settings(env_file: Optional[str] = None) -> RegressionSettings:
    """从配置文件重新读取回归配置（--config），缺省读取 .env"""
    global regression_settings
    regression_settings = RegressionSettings(_env_file=env_file or ".env")
    return regression_settings


Procedure = Callable[[PartitionedDataset, RngStream], CoefficientEstimate]


# ==================== 线性代数 ====================
def _least_squares(
    values: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
) -> tuple[np.ndarray, np.ndarray, float]:
    """
    列主元 QR 最小二乘

    Args:
        values: n×k 设计矩阵
        y: 因变量
        names: 列名（用于秩亏报错）

    Returns:
        (β, (X'X)⁻¹, 条件数)
    """
    n, k = values.shape
    if n <= k:
        raise SingularDesignError(names, f"样本数 {n} 不大于列数 {k}")
    q, r, piv = scipy.linalg.qr(values, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[0] == 0.0:
        raise SingularDesignError(names)
    rank = int(np.sum(diag > regression_settings.rank_tol * diag[0]))
    if rank < k:
        raise SingularDesignError([names[j] for j in piv[rank:]])
    beta = np.empty(k)
    beta[piv] = scipy.linalg.solve_triangular(r, q.T @ y)
    r_inv = scipy.linalg.solve_triangular(r, np.eye(k))
    xtx_inv = np.empty((k, k))
    xtx_inv[np.ix_(piv, piv)] = r_inv @ r_inv.T
    return beta, xtx_inv, float(diag[0] / diag[-1])


def _as_vector(y: np.ndarray, n: int, name: str) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{name} 长度 {y.shape[0]} 与设计矩阵行数 {n} 不一致")
    if not np.all(np.isfinite(y)):
        raise ConfigurationError(f"{name} 含有非有限值")
    return y


def _as_matrix(values: Optional[np.ndarray], n: int) -> np.ndarray:
    if values is None:
        return np.zeros((n, 0))
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.shape[0] != n:
        raise ShapeError(f"矩阵行数 {values.shape[0]} 与 {n} 不一致")
    return values


# ==================== OLS ====================
def ols_residuals(design: DesignMatrix, y: np.ndarray) -> np.ndarray:
    """OLS 残差 y − Xβ̂"""
    y = _as_vector(y, design.n, "y")
    beta, _, _ = _least_squares(design.values, y, design.names)
    return y - design.values @ beta


def fit_ols(design: DesignMatrix, y: np.ndarray) -> CoefficientEstimate:
    """
    普通最小二乘，同方差解析标准误

    Args:
        design: 设计矩阵（需满秩且 n > k）
        y: 因变量

    Returns:
        CoefficientEstimate
    """
    y = _as_vector(y, design.n, "y")
    beta, xtx_inv, cond = _least_squares(design.values, y, design.names)
    resid = y - design.values @ beta
    rss = float(resid @ resid)
    sigma2 = rss / (design.n - design.k)
    se = np.sqrt(np.maximum(sigma2 * np.diag(xtx_inv), 0.0))
    return CoefficientEstimate(
        names=design.names,
        point=beta.tolist(),
        se=se.tolist(),
        estimator="ols",
        diagnostics={"n": design.n, "rss": rss, "sigma2": sigma2, "condition_number": cond},
    )


# ==================== Logistic (IRLS) ====================
def log_likelihood(beta: np.ndarray, values: np.ndarray, y: np.ndarray) -> float:
    """logistic 对数似然 Σ yη − log(1 + eᶯ)"""
    eta = values @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def log_likelihood_gradient(beta: np.ndarray, values: np.ndarray, y: np.ndarray) -> np.ndarray:
    """对数似然梯度 X'(y − p)"""
    return values.T @ (y - expit(values @ beta))


def fit_logistic(
    design: DesignMatrix,
    y: np.ndarray,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
) -> CoefficientEstimate:
    """
    IRLS 极大似然 logistic 回归

    Args:
        design: 设计矩阵
        y: 0/1 因变量
        max_iter: 最大迭代次数
        tol: 系数最大变化量收敛阈值

    Returns:
        CoefficientEstimate: 标准误来自观测信息矩阵的逆
    """
    max_iter = max_iter if max_iter is not None else regression_settings.irls_max_iter
    tol = tol if tol is not None else regression_settings.irls_tol
    y = _as_vector(y, design.n, "y")
    if not np.all((y == 0) | (y == 1)):
        raise ConfigurationError("logistic 回归要求 y 只取 0 或 1")
    X = design.values
    _least_squares(X, y, design.names)  # 秩检查

    beta = np.zeros(design.k)
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        prob = expit(X @ beta)
        weight = prob * (1.0 - prob)
        info = X.T @ (X * weight[:, None])
        score = log_likelihood_gradient(beta, X, y)
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError) as e:
            raise ConvergenceError(f"信息矩阵不可逆（可能完全分离）: {e}", trace) from e
        beta = beta + step
        trace.append(float(np.max(np.abs(step))))
        if np.linalg.norm(beta) > regression_settings.separation_norm:
            raise ConvergenceError("系数范数发散，疑似完全分离", trace)
        if trace[-1] < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"IRLS 在 {max_iter} 次迭代内未收敛", trace)

    prob = expit(X @ beta)
    info = X.T @ (X * (prob * (1.0 - prob))[:, None])
    try:
        cov = scipy.linalg.inv(info)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise ConvergenceError(f"信息矩阵不可逆: {e}", trace) from e
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return CoefficientEstimate(
        names=design.names,
        point=beta.tolist(),
        se=se.tolist(),
        estimator="logistic",
        diagnostics={"iterations": len(trace), "log_likelihood": log_likelihood(beta, X, y)},
    )


# ==================== 第二阶段设计 ====================
def second_phase_design(mlv: np.ndarray, controls: np.ndarray, spec: SecondPhaseSpec) -> DesignMatrix:
    """
    按 SecondPhaseSpec 构造 [intercept, mlv, controls...] 设计矩阵

    Args:
        mlv: ML 生成的协变量（真实 X、预测值或校准值）
        controls: 控制变量 W (n×q)
        spec: 第二阶段设定

    Returns:
        DesignMatrix
    """
    mlv = np.asarray(mlv, dtype=float).reshape(-1)
    controls = _as_matrix(controls, mlv.shape[0])
    if len(spec.control_names) != controls.shape[1]:
        raise ShapeError(f"spec 中 {len(spec.control_names)} 个控制变量名，数据有 {controls.shape[1]} 列")
    head = [np.ones((mlv.shape[0], 1))] if spec.intercept else []
    return DesignMatrix(
        names=spec.coefficient_names(),
        values=np.hstack(head + [mlv.reshape(-1, 1), controls]),
    )


def fit_second_phase(design: DesignMatrix, y: np.ndarray, spec: SecondPhaseSpec) -> CoefficientEstimate:
    """线性设定用 OLS，logistic 设定用 IRLS"""
    spec.check_outcome(y)
    if spec.family == "logistic":
        return fit_logistic(design, y)
    return fit_ols(design, y)


# ==================== 工具变量 ====================
def _first_stage(
    endogenous: np.ndarray,
    instruments: np.ndarray,
    controls: np.ndarray,
    intercept: bool,
    control_names: list[str],
) -> tuple[np.ndarray, float]:
    """一阶段: 内生变量对 截距+控制变量+工具变量 回归，返回 (拟合值, 一阶段 F)"""
    n = endogenous.shape[0]
    exog = [np.ones((n, 1))] if intercept else []
    exog_names = (["intercept"] if intercept else []) + control_names
    exog.append(controls)
    exog_values = np.hstack(exog)
    iv_names = [f"iv_{k + 1}" for k in range(instruments.shape[1])]
    values = np.hstack([exog_values, instruments])
    beta, _, _ = _least_squares(values, endogenous, exog_names + iv_names)
    fitted = values @ beta
    rss_u = float(np.sum((endogenous - fitted) ** 2))
    if exog_values.shape[1]:
        b_r, _, _ = _least_squares(exog_values, endogenous, exog_names)
        rss_r = float(np.sum((endogenous - exog_values @ b_r) ** 2))
    else:
        rss_r = float(endogenous @ endogenous)
    df_den = n - values.shape[1]
    n_iv = instruments.shape[1]
    if rss_u <= 0.0:
        f_stat = float("inf")
    else:
        f_stat = ((rss_r - rss_u) / n_iv) / (rss_u / df_den)
    return fitted, float(f_stat)


def _iv_inputs(y, endogenous, instruments, controls, control_names):
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.shape[0]
    endogenous = _as_vector(endogenous, n, "endogenous")
    instruments = _as_matrix(instruments, n)
    if instruments.shape[1] < 1:
        raise ConfigurationError("至少需要 1 个工具变量")
    controls = _as_matrix(controls, n)
    if control_names is None:
        control_names = [f"w{k + 1}" for k in range(controls.shape[1])]
    control_names = list(control_names)
    if len(control_names) != controls.shape[1]:
        raise ShapeError("control_names 与控制变量列数不一致")
    return y, endogenous, instruments, controls, control_names


def fit_2sls(
    y: np.ndarray,
    endogenous: np.ndarray,
    instruments: np.ndarray,
    controls: Optional[np.ndarray] = None,
    intercept: bool = True,
    endogenous_name: str = "mlv",
    control_names: Optional[Sequence[str]] = None,
) -> CoefficientEstimate:
    """
    两阶段最小二乘

    二阶段用拟合值替换内生变量；标准误使用原内生变量计算的残差。

    Args:
        y: 因变量
        endogenous: 内生变量（ML 生成的协变量）
        instruments: 工具变量 (n×L)
        controls: 外生控制变量 (n×q)
        intercept: 是否含截距
        endogenous_name: 内生变量系数名
        control_names: 控制变量系数名

    Returns:
        CoefficientEstimate: diagnostics 含 first_stage_f
    """
    y, endogenous, instruments, controls, control_names = _iv_inputs(
        y, endogenous, instruments, controls, control_names
    )
    n = y.shape[0]
    fitted, f_stat = _first_stage(endogenous, instruments, controls, intercept, control_names)

    names = (["intercept"] if intercept else []) + [endogenous_name] + control_names
    head = [np.ones((n, 1))] if intercept else []
    stage2 = np.hstack(head + [fitted.reshape(-1, 1), controls])
    beta, xtx_inv, cond = _least_squares(stage2, y, names)
    original = np.hstack(head + [endogenous.reshape(-1, 1), controls])
    resid = y - original @ beta
    sigma2 = float(resid @ resid) / (n - len(names))
    se = np.sqrt(np.maximum(sigma2 * np.diag(xtx_inv), 0.0))
    return CoefficientEstimate(
        names=names,
        point=beta.tolist(),
        se=se.tolist(),
        estimator="2sls",
        diagnostics={
            "first_stage_f": f_stat,
            "n_instruments": int(instruments.shape[1]),
            "condition_number": cond,
        },
    )


def fit_2sri(
    y: np.ndarray,
    endogenous: np.ndarray,
    instruments: np.ndarray,
    controls: Optional[np.ndarray] = None,
    intercept: bool = True,
    endogenous_name: str = "mlv",
    control_names: Optional[Sequence[str]] = None,
) -> CoefficientEstimate:
    """
    两阶段残差纳入（控制函数法）

    二阶段 logistic 同时包含内生变量和一阶段残差；报告的系数不含残差项。
    一阶段残差在数值上为 0 时（内生变量被工具变量完全解释）去掉残差列。
    """
    y, endogenous, instruments, controls, control_names = _iv_inputs(
        y, endogenous, instruments, controls, control_names
    )
    n = y.shape[0]
    fitted, f_stat = _first_stage(endogenous, instruments, controls, intercept, control_names)
    residual = endogenous - fitted

    names = (["intercept"] if intercept else []) + [endogenous_name] + control_names
    head = [np.ones((n, 1))] if intercept else []
    columns = head + [endogenous.reshape(-1, 1), controls]
    scale = max(float(np.linalg.norm(endogenous - endogenous.mean())), 1.0)
    dropped = float(np.linalg.norm(residual)) <= regression_settings.residual_drop_tol * scale
    full_names = list(names)
    if not dropped:
        columns.append(residual.reshape(-1, 1))
        full_names.append("first_stage_residual")
    fit = fit_logistic(DesignMatrix(names=full_names, values=np.hstack(columns)), y)
    k = len(names)
    diagnostics = {
        "first_stage_f": f_stat,
        "n_instruments": int(instruments.shape[1]),
        "residual_dropped": dropped,
        "iterations": fit.diagnostics.get("iterations"),
    }
    if not dropped:
        diagnostics["residual_coef"] = fit.point[-1]
    return CoefficientEstimate(
        names=names,
        point=fit.point[:k],
        se=fit.se[:k],
        estimator="2sri",
        diagnostics=diagnostics,
    )


# ==================== Bootstrap ====================
def _bootstrap_replicate(job: tuple) -> Optional[CoefficientEstimate]:
    procedure, data, stream = job
    resampled = resample_partitions(data, stream.child(0))
    try:
        return procedure(resampled, stream.child(1))
    except EstimationError as e:
        logger.debug(f"bootstrap 副本 {stream.stream_path} 失败: {e}")
        return None


def bootstrap_estimates(
    procedure: Procedure,
    data: PartitionedDataset,
    B: int,
    rng: RngStream,
    n_jobs: Optional[int] = 1,
) -> CoefficientEstimate:
    """
    分区 bootstrap 标准误

    每个副本在各分区内独立有放回重抽样，重新执行完整估计流程（含集成重训练）。
    失败副本丢弃并计数。

    Args:
        procedure: 估计闭包 (数据集, 随机数流) → CoefficientEstimate
        data: 原分区数据集
        B: 副本数
        rng: 随机数流；点估计用子流 (0,)，第 b 个副本用 (1, b)
        n_jobs: 副本并行度

    Returns:
        CoefficientEstimate: 原数据点估计 + bootstrap 标准误
    """
    if B < 2:
        raise ConfigurationError(f"bootstrap 副本数必须 ≥ 2，当前 {B}")
    point = procedure(data, rng.child(0))
    jobs = [(procedure, data, rng.child(1, b)) for b in range(B)]
    results = run_parallel(_bootstrap_replicate, jobs, n_jobs=n_jobs)
    successes = [r for r in results if r is not None]
    failed = B - len(successes)
    if failed > 0:
        logger.warning(f"⚠️ bootstrap: {failed}/{B} 个副本失败，已丢弃")
    if failed / B > 0.5 or len(successes) < 2:
        raise BootstrapDegeneracyError(failed, B)
    draws = np.array([r.point for r in successes])
    se = draws.std(axis=0, ddof=1)
    return point.model_copy(update={
        "se": se.tolist(),
        "se_source": "bootstrap",
        "diagnostics": {
            **point.diagnostics,
            "bootstrap_replicates": B,
            "bootstrap_failures": failed,
            "bootstrap_failure_fraction": failed / B,
        },
    })
