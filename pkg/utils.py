"""
工具函数 - 样本统计量、格式化、参数校验
"""
from typing import Sequence

import numpy as np


# ==================== Sample Statistics ====================
def sample_cov(a: np.ndarray, b: np.ndarray) -> float:
    """
    样本协方差（n-1 分母）

    Args:
        a: 向量
        b: 等长向量

    Returns:
        协方差
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.dot(a - a.mean(), b - b.mean()) / (a.shape[0] - 1))


def sample_sd(a: np.ndarray) -> float:
    """样本标准差（n-1 分母）"""
    return float(np.std(np.asarray(a, dtype=float), ddof=1))


def sample_corr(a: np.ndarray, b: np.ndarray) -> float:
    """
    样本相关系数，任一方差为 0 时返回 0

    Args:
        a: 向量
        b: 等长向量

    Returns:
        相关系数
    """
    sa, sb = sample_sd(a), sample_sd(b)
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return sample_cov(a, b) / (sa * sb)


def column_cov(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """矩阵每一列与向量的样本协方差"""
    centered = matrix - matrix.mean(axis=0)
    return centered.T @ (vector - vector.mean()) / (matrix.shape[0] - 1)


def column_corr(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """
    矩阵每一列与向量的样本相关系数（向量化）

    方差为 0 的列相关系数记为 0

    Args:
        matrix: n×k 矩阵
        vector: 长度 n 的向量

    Returns:
        长度 k 的相关系数
    """
    matrix = np.asarray(matrix, dtype=float)
    vector = np.asarray(vector, dtype=float)
    sd_cols = matrix.std(axis=0, ddof=1)
    sd_vec = vector.std(ddof=1)
    cov = column_cov(matrix, vector)
    denom = sd_cols * sd_vec
    out = np.zeros_like(cov)
    ok = denom > 0
    out[ok] = cov[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def standardize_columns(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    按列中心化并缩放到总体标准差 1

    Returns:
        (标准化矩阵, 各列是否非常数的掩码)
    """
    centered = matrix - matrix.mean(axis=0)
    scale = np.sqrt((centered ** 2).mean(axis=0))
    keep = scale > 0
    out = np.zeros_like(centered)
    out[:, keep] = centered[:, keep] / scale[keep]
    return out, keep


# ==================== Formatting ====================
def format_estimate(value: float, digits: int = 3) -> str:
    """格式化估计值，例如 0.553"""
    if value is None or not np.isfinite(value):
        return "NA"
    return f"{value:.{digits}f}"


def format_sd(value: float, digits: int = 3) -> str:
    """格式化标准差，括号形式，例如 (0.013)"""
    return f"({format_estimate(value, digits)})"


def format_duration(seconds: float) -> str:
    """
    格式化耗时

    Args:
        seconds: 秒数

    Returns:
        人类可读的耗时字符串
    """
    if seconds < 60:
        return f"{seconds:.1f} s"
    if seconds < 3600:
        return f"{seconds / 60:.1f} min"
    return f"{seconds / 3600:.2f} h"


def parse_list(raw: str, cast=str) -> list:
    """将逗号分隔字符串拆成列表"""
    return [cast(item.strip()) for item in raw.split(",") if item.strip()]


# ==================== Validation ====================
def validate_fold_count(k: int, pool_size: int) -> tuple[bool, str]:
    """
    验证交叉拟合折数

    Args:
        k: 折数
        pool_size: 有标签样本数

    Returns:
        tuple[bool, str]: (是否有效, 错误信息)
    """
    if k < 2:
        return False, f"折数必须 ≥ 2，当前 {k}"
    if pool_size < 2 * k:
        return False, f"有标签样本数 {pool_size} 不足 2×{k}"
    return True, ""


def validate_selection_params(method: str, n: int, n_learners: int) -> tuple[bool, str]:
    """
    验证工具变量选择参数

    Args:
        method: top_n / pca / lasso
        n: 选取个数
        n_learners: 集成中学习器个数 M

    Returns:
        tuple[bool, str]: (是否有效, 错误信息)
    """
    if method not in ("top_n", "pca", "lasso"):
        return False, f"无效的选择方法 {method}，必须是: top_n, pca, lasso"
    if method != "lasso" and not 1 <= n <= n_learners - 1:
        return False, f"n 必须在 1..{n_learners - 1} 之间，当前 {n}"
    return True, ""


def validate_probability(name: str, value: float) -> tuple[bool, str]:
    """验证取值在 (0, 1) 内"""
    if not 0.0 < value < 1.0:
        return False, f"{name} 必须在 (0, 1) 之间，当前 {value}"
    return True, ""


def validate_split_sizes(sizes: Sequence[int]) -> tuple[bool, str]:
    """验证各分区大小均为正数"""
    if any(s < 1 for s in sizes):
        return False, f"各分区大小必须 ≥ 1，当前 {list(sizes)}"
    return True, ""
