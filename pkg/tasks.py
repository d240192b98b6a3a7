"""
并行任务 - 使用 joblib 扇出独立任务（重复实验、bootstrap 副本、bagging 树、交叉拟合折）

随机数流在扇出前全部派生好，因此结果与 n_jobs 无关。
"""
import logging
from typing import Any, Callable, Iterable, Literal, Optional

from joblib import Parallel, cpu_count, delayed

logger = logging.getLogger(__name__)


# ==================== 日志 ====================
def configure_logging(level: str = "INFO") -> None:
    """
    配置根日志

    Args:
        level: 日志级别名称
    """
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# ==================== 并行执行 ====================
def effective_jobs(n_jobs: Optional[int]) -> int:
    """
    解析并行度

    Args:
        n_jobs: None/1 表示串行，-1 表示全部核心

    Returns:
        int: 实际 worker 数
    """
    if n_jobs is None or n_jobs == 0:
        return 1
    if n_jobs < 0:
        return max(1, cpu_count() + 1 + n_jobs)
    return n_jobs


def run_parallel(
    func: Callable[[Any], Any],
    items: Iterable[Any],
    n_jobs: Optional[int] = 1,
    prefer: Literal["processes", "threads"] = "processes",
) -> list:
    """
    对每个 item 调用 func，按输入顺序返回结果

    Args:
        func: 任务函数（进程模式下需可被 cloudpickle 序列化）
        items: 任务参数
        n_jobs: 并行度
        prefer: numpy 密集任务用 threads，纯 Python 任务用 processes

    Returns:
        list: 结果列表
    """
    items = list(items)
    jobs = effective_jobs(n_jobs)
    if jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug(f"🚀 并行执行 {len(items)} 个任务, n_jobs={jobs}, prefer={prefer}")
    return Parallel(n_jobs=jobs, prefer=prefer)(delayed(func)(item) for item in items)


def get_parallel_info(n_jobs: Optional[int]) -> dict:
    """
    获取并行配置信息（写入报告的配置回显）

    Returns:
        dict: 并行信息
    """
    return {
        "requested_jobs": n_jobs,
        "effective_jobs": effective_jobs(n_jobs),
        "cpu_count": cpu_count(),
    }
