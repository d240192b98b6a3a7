"""
数据访问层 - 分区、交叉拟合折、CSV 摄入、分区内重抽样
"""
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from pydantic_settings import BaseSettings

from errors import (
    ConfigurationError, CsvParseError, DataInputError,
    InvalidPartitionError, SchemaError,
)
from models import PartitionedDataset, RngStream, SampleSet
from utils import validate_fold_count

logger = logging.getLogger(__name__)


class DataSettings(BaseSettings):
    """数据划分配置"""
    default_folds: int = 4  # 主实验 K=4，boosting/实地数据建议 K=3
    diagnostic_fraction: float = 0.2  # D_diagnostic 占有标签样本比例

    class Config:
        env_file = ".env"
        env_prefix = "DATA_"
        extra = "ignore"


data_settings = DataSettings()


def load_data_settings(env_file: Optional[str] = None) -> DataSettings:
    """从配置文件重新读取数据配置（--config），缺省读取 .env"""
    global data_settings
    data_settings = DataSettings(_env_file=env_file or ".env")
    return data_settings


# ==================== 交叉拟合折 ====================
def partition_labeled(pool: SampleSet, k: int, rng: RngStream) -> dict[int, int]:
    """
    将有标签样本随机分成 K 折

    折大小最多相差 1；前 (n mod k) 折多 1 个样本。

    Args:
        pool: 有标签样本池
        k: 折数
        rng: 随机数流

    Returns:
        dict[int, int]: 样本 id → 折号 (1..K)
    """
    ok, message = validate_fold_count(k, pool.n)
    if not ok:
        raise InvalidPartitionError(message)
    order = rng.generator().permutation(pool.n)
    folds = np.empty(pool.n, dtype=np.int64)
    folds[order] = np.arange(pool.n) % k + 1
    return {int(sample_id): int(f) for sample_id, f in zip(pool.ids, folds)}


def fold_rows(pool: SampleSet, assignment: dict[int, int], fold: int) -> np.ndarray:
    """某一折在 pool 中的行号掩码"""
    return np.array([assignment[int(i)] == fold for i in pool.ids], dtype=bool)


def split_fold(pool: SampleSet, assignment: dict[int, int], fold: int) -> tuple[SampleSet, SampleSet]:
    """
    按折切分训练/测试

    Returns:
        (D_train = 不在第 fold 折的样本, D_test = 第 fold 折)
    """
    mask = fold_rows(pool, assignment, fold)
    if not mask.any():
        raise InvalidPartitionError(f"第 {fold} 折为空")
    return pool.take(np.flatnonzero(~mask)), pool.take(np.flatnonzero(mask))


def make_partitioned(
    pool: SampleSet,
    d_unlabel: SampleSet,
    k: int,
    rng: RngStream,
    test_fold: int = 1,
    d_diagnostic: Optional[SampleSet] = None,
) -> PartitionedDataset:
    """
    构造带折信息的分区数据集，第 test_fold 折作为 D_test

    Args:
        pool: 有标签样本池（不含 D_diagnostic）
        d_unlabel: 无标签样本
        k: 折数
        rng: 随机数流
        test_fold: 作为 D_test 的折号
        d_diagnostic: 可选诊断分区

    Returns:
        PartitionedDataset
    """
    assignment = partition_labeled(pool, k, rng)
    d_train, d_test = split_fold(pool, assignment, test_fold)
    folds = dict(assignment)
    if d_diagnostic is not None:
        # 诊断分区不参与交叉拟合
        folds = None
    return PartitionedDataset(
        d_train=d_train,
        d_test=d_test,
        d_unlabel=d_unlabel,
        d_diagnostic=d_diagnostic,
        fold_assignments=folds,
    )


# ==================== 简单随机划分 ====================
def split_by_size(data: SampleSet, size: int, rng: RngStream) -> tuple[SampleSet, SampleSet]:
    """
    简单随机划分，返回 (前 size 个, 其余)

    Args:
        data: 样本集合
        size: 第一部分大小
        rng: 随机数流
    """
    if not 0 < size < data.n:
        raise InvalidPartitionError(f"划分大小 {size} 必须在 1..{data.n - 1} 之间")
    order = rng.generator().permutation(data.n)
    return data.take(np.sort(order[:size])), data.take(np.sort(order[size:]))


def holdout_diagnostic(
    pool: SampleSet,
    rng: RngStream,
    fraction: Optional[float] = None,
) -> tuple[SampleSet, SampleSet]:
    """
    预留 D_diagnostic

    Returns:
        (剩余有标签样本, D_diagnostic)
    """
    fraction = data_settings.diagnostic_fraction if fraction is None else fraction
    size = int(round(pool.n * fraction))
    diagnostic, rest = split_by_size(pool, size, rng)
    return rest, diagnostic


# ==================== Bootstrap 重抽样 ====================
def resample_partitions(data: PartitionedDataset, rng: RngStream) -> PartitionedDataset:
    """
    各分区独立有放回重抽样（大小不变）

    重抽样后样本 id 重新编号以保持分区互斥；折信息丢弃。

    Args:
        data: 原分区数据集
        rng: 随机数流

    Returns:
        PartitionedDataset: 重抽样结果
    """
    gen = rng.generator()
    offset = 0
    parts = {}
    for name in ("d_train", "d_test", "d_unlabel", "d_diagnostic"):
        part = getattr(data, name)
        if part is None:
            parts[name] = None
            continue
        rows = gen.integers(0, part.n, size=part.n)
        parts[name] = part.take(rows, ids=np.arange(offset, offset + part.n))
        offset += part.n
    return PartitionedDataset(**parts)


# ==================== CSV 摄入 ====================
class ColumnSchema(BaseModel):
    """CSV 列角色映射"""
    model_config = ConfigDict(frozen=True)

    outcome: str
    label: Optional[str] = None
    controls: list[str] = []
    features: list[str] = []


def parse_schema(text: str) -> ColumnSchema:
    """
    解析列角色字符串 y=<col>,x=<col?>,w=<col,...>,v=<col,...>

    不带 '=' 的片段归入上一个角色，例如 "y=out,w=a,b,v=f1,f2"。

    Args:
        text: 角色字符串

    Returns:
        ColumnSchema
    """
    roles: dict[str, list[str]] = {"y": [], "x": [], "w": [], "v": []}
    current: Optional[str] = None
    for token in (t.strip() for t in text.split(",")):
        if not token:
            continue
        if "=" in token:
            role, _, col = token.partition("=")
            role = role.strip().lower()
            if role not in roles:
                raise ConfigurationError(f"未知的列角色 '{role}'，必须是 y/x/w/v")
            current = role
            token = col.strip()
            if not token:
                continue
        if current is None:
            raise ConfigurationError(f"列 '{token}' 没有指定角色")
        roles[current].append(token)
    if len(roles["y"]) != 1:
        raise ConfigurationError("schema 必须恰好指定一个结果列 y")
    if len(roles["x"]) > 1:
        raise ConfigurationError("schema 最多指定一个标签列 x")
    return ColumnSchema(
        outcome=roles["y"][0],
        label=roles["x"][0] if roles["x"] else None,
        controls=roles["w"],
        features=roles["v"],
    )


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    """将字符串列转为 float，失败时报告行号（数据行从 1 开始计）"""
    raw = frame[column].astype(str).str.strip()
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise CsvParseError(row=row + 1, column=column, value=raw.iloc[row] or "<missing>")
    return values


def ingest_csv(
    path: Union[str, Path],
    schema: Union[ColumnSchema, str],
    binary_label: bool = False,
    id_offset: int = 0,
) -> SampleSet:
    """
    读取 CSV 为样本集合

    Args:
        path: 文件路径（必须有表头）
        schema: 列角色映射或角色字符串
        binary_label: X 是否为 0/1 标签
        id_offset: 样本 id 起始值（多个文件合并时避免重叠）

    Returns:
        SampleSet: 样本；标签列不在文件中时 X 为空
    """
    if isinstance(schema, str):
        schema = parse_schema(schema)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataInputError(f"无法读取 {path}: {e}") from e

    if schema.outcome not in frame.columns:
        raise SchemaError(f"{path} 缺少结果列 '{schema.outcome}'")
    missing = [c for c in schema.features + schema.controls if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path} 缺少列: {', '.join(missing)}")
    if not schema.features:
        raise SchemaError("schema 至少需要一个特征列 v")

    n = len(frame)
    features = np.column_stack([_numeric_column(frame, c) for c in schema.features])
    controls = (
        np.column_stack([_numeric_column(frame, c) for c in schema.controls])
        if schema.controls else np.zeros((n, 0))
    )
    outcomes = _numeric_column(frame, schema.outcome)
    labels = None
    if schema.label is not None and schema.label in frame.columns:
        labels = _numeric_column(frame, schema.label)
        if binary_label and not np.all((labels == 0) | (labels == 1)):
            bad = int(np.flatnonzero((labels != 0) & (labels != 1))[0])
            raise CsvParseError(row=bad + 1, column=schema.label, value=str(labels[bad]))

    logger.info(f"📄 已读取 {path}: {n} 行, {len(schema.features)} 个特征, {len(schema.controls)} 个控制变量")
    return SampleSet.from_arrays(
        features=features,
        outcomes=outcomes,
        labels=labels,
        controls=controls,
        ids=np.arange(id_offset, id_offset + n),
        feature_names=schema.features,
        control_names=schema.controls,
        binary_label=binary_label,
    )
