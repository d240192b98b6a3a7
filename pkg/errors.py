"""
异常定义 - 每类异常对应 CLI 退出码

退出码约定：
    0  成功
    2  配置错误（参数非法、划分非法、维度不符）
    3  估计失败（奇异设计、不收敛、λ 退化、全部学习器跳过、bootstrap 退化）
    4  输入输出错误（CSV 结构/解析失败、报告写入失败）
"""
from typing import Optional, Sequence


class EnsembleIVError(Exception):
    """所有业务异常的基类"""
    exit_code: int = 1


# ==================== 配置错误 (exit 2) ====================
class ConfigurationError(EnsembleIVError):
    """参数或配置非法"""
    exit_code = 2


class InvalidPartitionError(ConfigurationError):
    """数据划分或折数非法"""


class ShapeError(ConfigurationError):
    """向量/矩阵维度不匹配"""


# ==================== 估计失败 (exit 3) ====================
class EstimationError(EnsembleIVError):
    """估计过程失败"""
    exit_code = 3


class SingularDesignError(EstimationError):
    """设计矩阵秩亏"""

    def __init__(self, columns: Sequence[str], message: Optional[str] = None):
        self.columns = list(columns)
        super().__init__(message or f"设计矩阵秩亏，问题列: {', '.join(self.columns)}")


class ConvergenceError(EstimationError):
    """迭代算法未收敛（含完全分离）"""

    def __init__(self, message: str, trace: Optional[Sequence[float]] = None):
        self.trace = list(trace or [])
        super().__init__(message)


class DegenerateLambdaError(EstimationError):
    """λ 分母接近 0，该 (i, j) 对不可用"""

    def __init__(self, pair: tuple[int, int], message: Optional[str] = None):
        self.pair = pair
        super().__init__(message or f"λ 退化: 学习器对 {pair}")


class EstimationFailureError(EstimationError):
    """所有学习器都被跳过"""


class FoldEstimationError(EstimationFailureError):
    """交叉拟合中某一折估计失败"""

    def __init__(self, fold: int, cause: Exception):
        self.fold = fold
        self.cause = cause
        super().__init__(f"第 {fold} 折估计失败: {cause}")


class BootstrapDegeneracyError(EstimationError):
    """bootstrap 失败副本过多"""

    def __init__(self, failed: int, total: int):
        self.failed = failed
        self.total = total
        self.failure_fraction = failed / total if total else 1.0
        super().__init__(f"bootstrap 失败比例过高: {failed}/{total}")


# ==================== 输入输出错误 (exit 4) ====================
class DataInputError(EnsembleIVError):
    """输入数据不可用"""
    exit_code = 4


class SchemaError(DataInputError):
    """CSV 列角色与文件不符"""


class CsvParseError(DataInputError):
    """CSV 单元格无法解析为数值"""

    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"第 {row} 行, 列 '{column}' 无法解析: {value!r}")


class ReportIOError(DataInputError):
    """报告读写失败"""

    def __init__(self, path: str, cause: Exception):
        self.path = path
        self.cause = cause
        super().__init__(f"无法写入/读取 {path}: {cause}")
