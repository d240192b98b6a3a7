"""
数据模型定义 - 领域类型

所有类型构造后不可变（numpy 数组设为只读），可以在并行任务之间安全共享。
"""
from typing import Any, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigurationError, InvalidPartitionError, ShapeError


Family = Literal["linear", "logistic"]
Task = Literal["regression", "classification"]
EstimatorTag = Literal[
    "ols", "logistic", "2sls", "2sri", "ensembleiv", "ensembleiv_cf",
    "biased", "unbiased", "regcal", "regcal_cf", "extended", "subset_trees",
]


def _readonly(value: Any, ndim: int, name: str) -> np.ndarray:
    """复制为只读 float 数组并检查维度"""
    arr = np.array(value, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} 需要 {ndim} 维数组，实际 {arr.ndim} 维")
    arr.setflags(write=False)
    return arr


def _is_binary(values: np.ndarray) -> bool:
    return bool(np.all((values == 0.0) | (values == 1.0)))


# ==================== 随机数流 ====================
class RngStream(BaseModel):
    """
    确定性随机数流

    (master_seed, stream_path) 相同则抽样序列完全相同；不同路径的流相互独立。
    路径一般按 (重复, 学习器, bootstrap 副本, 置换) 逐层追加。
    """
    model_config = ConfigDict(frozen=True)

    master_seed: int = Field(ge=0, lt=2 ** 64)
    stream_path: tuple[int, ...] = ()

    def child(self, *keys: int) -> "RngStream":
        """派生子流"""
        return RngStream(master_seed=self.master_seed, stream_path=self.stream_path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        """生成 numpy Generator（每次调用都从流起点开始）"""
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.stream_path)
        return np.random.default_rng(seq)


# ==================== 样本 ====================
class Sample(BaseModel):
    """单条样本 (V, X, Y, W)"""
    model_config = ConfigDict(frozen=True)

    features: list[float]
    label: Optional[float] = None
    outcome: float
    controls: list[float] = []

    @model_validator(mode="after")
    def _finite(self) -> "Sample":
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.controls)):
            raise ConfigurationError("特征和控制变量必须是有限实数")
        return self


class SampleSet(BaseModel):
    """
    列式样本集合

    ids 是样本身份（摄入时的行号），partitions 之间用它判断是否重叠。
    labels 为 None 表示该集合没有真实 X。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: np.ndarray
    features: np.ndarray
    outcomes: np.ndarray
    labels: Optional[np.ndarray] = None
    controls: np.ndarray
    feature_names: list[str] = []
    control_names: list[str] = []
    binary_label: bool = False

    @field_validator("ids", mode="before")
    @classmethod
    def _ids(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=np.int64).reshape(-1)
        arr.setflags(write=False)
        return arr

    @field_validator("features", "controls", mode="before")
    @classmethod
    def _matrix(cls, v: Any, info) -> np.ndarray:
        return _readonly(v, 2, info.field_name)

    @field_validator("outcomes", mode="before")
    @classmethod
    def _vector(cls, v: Any) -> np.ndarray:
        return _readonly(v, 1, "outcomes")

    @field_validator("labels", mode="before")
    @classmethod
    def _labels(cls, v: Any) -> Optional[np.ndarray]:
        return None if v is None else _readonly(v, 1, "labels")

    @model_validator(mode="after")
    def _consistent(self) -> "SampleSet":
        n = self.ids.shape[0]
        if self.controls.size == 0:
            object.__setattr__(self, "controls", _readonly(np.zeros((n, 0)), 2, "controls"))
        for name, arr in (("features", self.features), ("outcomes", self.outcomes), ("controls", self.controls)):
            if arr.shape[0] != n:
                raise ShapeError(f"{name} 行数 {arr.shape[0]} 与样本数 {n} 不一致")
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} 含有非有限值")
        if self.labels is not None:
            if self.labels.shape[0] != n:
                raise ShapeError(f"labels 长度 {self.labels.shape[0]} 与样本数 {n} 不一致")
            if not np.all(np.isfinite(self.labels)):
                raise ConfigurationError("labels 含有非有限值")
            if self.binary_label and not _is_binary(self.labels):
                raise ConfigurationError("二值标签数据集的 X 只能取 0 或 1")
        if self.feature_names and len(self.feature_names) != self.features.shape[1]:
            raise ShapeError("feature_names 与特征列数不一致")
        if self.control_names and len(self.control_names) != self.controls.shape[1]:
            raise ShapeError("control_names 与控制变量列数不一致")
        return self

    @classmethod
    def from_arrays(
        cls,
        features: np.ndarray,
        outcomes: np.ndarray,
        labels: Optional[np.ndarray] = None,
        controls: Optional[np.ndarray] = None,
        ids: Optional[np.ndarray] = None,
        feature_names: Optional[Sequence[str]] = None,
        control_names: Optional[Sequence[str]] = None,
        binary_label: bool = False,
    ) -> "SampleSet":
        """由数组构造，ids 缺省为行号"""
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        n = features.shape[0]
        if controls is None:
            controls = np.zeros((n, 0))
        controls = np.asarray(controls, dtype=float)
        if controls.ndim == 1:
            controls = controls.reshape(-1, 1)
        return cls(
            ids=np.arange(n) if ids is None else ids,
            features=features,
            outcomes=outcomes,
            labels=labels,
            controls=controls,
            feature_names=list(feature_names or []),
            control_names=list(control_names or []),
            binary_label=binary_label,
        )

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def require_labels(self, what: str = "该分区") -> np.ndarray:
        """返回 labels，不存在时报错"""
        if self.labels is None:
            raise ConfigurationError(f"{what} 缺少真实标签 X")
        return self.labels

    def take(self, rows: np.ndarray, ids: Optional[np.ndarray] = None) -> "SampleSet":
        """
        按行取子集

        Args:
            rows: 行下标（可重复，用于 bootstrap）
            ids: 新的样本身份；缺省沿用原 ids

        Returns:
            SampleSet: 子集
        """
        rows = np.asarray(rows, dtype=np.int64)
        return SampleSet(
            ids=self.ids[rows] if ids is None else ids,
            features=self.features[rows],
            outcomes=self.outcomes[rows],
            labels=None if self.labels is None else self.labels[rows],
            controls=self.controls[rows],
            feature_names=self.feature_names,
            control_names=self.control_names,
            binary_label=self.binary_label,
        )

    def without_labels(self) -> "SampleSet":
        """去掉真实标签（模拟无标签分区时使用）"""
        return self.model_copy(update={"labels": None})

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        """按行拼接；任一部分无标签则结果无标签"""
        if not parts:
            raise ConfigurationError("没有可拼接的样本集合")
        first = parts[0]
        labels = None
        if all(p.labels is not None for p in parts):
            labels = np.concatenate([p.labels for p in parts])
        return cls(
            ids=np.concatenate([p.ids for p in parts]),
            features=np.vstack([p.features for p in parts]),
            outcomes=np.concatenate([p.outcomes for p in parts]),
            labels=labels,
            controls=np.vstack([p.controls for p in parts]),
            feature_names=first.feature_names,
            control_names=first.control_names,
            binary_label=first.binary_label,
        )

    def row(self, i: int) -> Sample:
        """取出第 i 条样本"""
        return Sample(
            features=self.features[i].tolist(),
            label=None if self.labels is None else float(self.labels[i]),
            outcome=float(self.outcomes[i]),
            controls=self.controls[i].tolist(),
        )


class PartitionedDataset(BaseModel):
    """
    分区数据集 D_train / D_test / D_unlabel / D_diagnostic

    fold_assignments: 样本 id → 折号 (1..K)，覆盖全部有标签样本
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    d_train: SampleSet
    d_test: SampleSet
    d_unlabel: SampleSet
    d_diagnostic: Optional[SampleSet] = None
    fold_assignments: Optional[dict[int, int]] = None

    @model_validator(mode="after")
    def _check(self) -> "PartitionedDataset":
        parts = {"d_train": self.d_train, "d_test": self.d_test, "d_unlabel": self.d_unlabel}
        if self.d_diagnostic is not None:
            parts["d_diagnostic"] = self.d_diagnostic
        names = list(parts)
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                shared = np.intersect1d(parts[names[a]].ids, parts[names[b]].ids)
                if shared.size:
                    raise InvalidPartitionError(f"{names[a]} 与 {names[b]} 有 {shared.size} 个重叠样本")
        for name in ("d_train", "d_test", "d_diagnostic"):
            part = parts.get(name)
            if part is not None and not part.has_labels:
                raise InvalidPartitionError(f"{name} 中所有样本都必须有标签 X")
        if self.d_unlabel.n < 1:
            raise InvalidPartitionError("d_unlabel 至少需要 1 个样本")
        if self.d_test.n < 1:
            raise InvalidPartitionError("d_test 至少需要 1 个样本")
        if self.fold_assignments is not None:
            pool_ids = set(self.labeled_pool().ids.tolist())
            if set(self.fold_assignments) != pool_ids:
                raise InvalidPartitionError("fold_assignments 必须恰好覆盖有标签样本")
            folds = set(self.fold_assignments.values())
            k = max(folds)
            if k < 2 or folds != set(range(1, k + 1)):
                raise InvalidPartitionError(f"折号必须是 1..K 且 K ≥ 2，当前 {sorted(folds)}")
        return self

    def labeled_pool(self) -> SampleSet:
        """有标签样本池 = D_train ∪ D_test (∪ D_diagnostic)"""
        parts = [self.d_train, self.d_test]
        if self.d_diagnostic is not None:
            parts.append(self.d_diagnostic)
        return SampleSet.concat(parts)


# ==================== 第二阶段回归设定 ====================
class SecondPhaseSpec(BaseModel):
    """第二阶段回归 Y = β₀ + β·MLV + W·Π + ε 的设定"""
    model_config = ConfigDict(frozen=True)

    family: Family = "linear"
    mlv_name: str = "mlv"
    control_names: list[str] = []
    intercept: bool = True

    def coefficient_names(self) -> list[str]:
        """系数名顺序: intercept, mlv, controls..."""
        names = ["intercept"] if self.intercept else []
        return names + [self.mlv_name] + list(self.control_names)

    def check_outcome(self, y: np.ndarray) -> None:
        """logistic 设定要求 Y ∈ {0, 1}"""
        if self.family == "logistic" and not _is_binary(np.asarray(y)):
            raise ConfigurationError("logistic 第二阶段要求 Y 只取 0 或 1")


class DesignMatrix(BaseModel):
    """带列名的设计矩阵"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    names: list[str]
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _values(cls, v: Any) -> np.ndarray:
        return _readonly(v, 2, "values")

    @model_validator(mode="after")
    def _check(self) -> "DesignMatrix":
        if len(self.names) != self.values.shape[1]:
            raise ShapeError(f"列名 {len(self.names)} 个，列数 {self.values.shape[1]}")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError(f"列名重复: {self.names}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("设计矩阵含有非有限值")
        return self

    @classmethod
    def build(cls, columns: Sequence[tuple[str, np.ndarray]], intercept: bool = True) -> "DesignMatrix":
        """
        由 (列名, 向量或矩阵) 列表构造；矩阵列名追加 _1, _2 ... 后缀

        Args:
            columns: 列定义
            intercept: 是否在最前面加截距列

        Returns:
            DesignMatrix
        """
        names: list[str] = []
        blocks: list[np.ndarray] = []
        n = None
        for name, col in columns:
            arr = np.asarray(col, dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1)
                col_names = [name]
            else:
                col_names = [f"{name}_{k + 1}" for k in range(arr.shape[1])]
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ShapeError(f"列 {name} 长度 {arr.shape[0]} 与 {n} 不一致")
            names.extend(col_names)
            blocks.append(arr)
        if n is None:
            raise ConfigurationError("设计矩阵至少需要一列")
        if intercept:
            names.insert(0, "intercept")
            blocks.insert(0, np.ones((n, 1)))
        return cls(names=names, values=np.hstack(blocks))

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def k(self) -> int:
        return int(self.values.shape[1])


class CoefficientEstimate(BaseModel):
    """系数估计结果"""
    model_config = ConfigDict(frozen=True)

    names: list[str]
    point: list[float]
    se: list[float]
    estimator: EstimatorTag
    se_source: Literal["analytic", "bootstrap"] = "analytic"
    diagnostics: dict[str, Any] = {}

    @model_validator(mode="after")
    def _check(self) -> "CoefficientEstimate":
        if not len(self.names) == len(self.point) == len(self.se):
            raise ShapeError("names / point / se 长度必须一致")
        if any(s < 0 for s in self.se):
            raise ConfigurationError("标准误必须 ≥ 0")
        return self

    def coef(self, name: str) -> float:
        return self.point[self.names.index(name)]

    def std_err(self, name: str) -> float:
        return self.se[self.names.index(name)]

    def point_array(self) -> np.ndarray:
        return np.asarray(self.point, dtype=float)

    def predict(self, design: DesignMatrix) -> np.ndarray:
        """线性预测 Xβ（按列名对齐）"""
        beta = np.array([self.coef(name) for name in design.names])
        return design.values @ beta


# ==================== 学习器预测矩阵 ====================
class LearnerPredictionMatrix(BaseModel):
    """n×M 的逐学习器预测矩阵"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    learner_kind: Literal["individual", "cumulative", "subset"] = "individual"
    task: Task = "regression"

    @field_validator("values", mode="before")
    @classmethod
    def _values(cls, v: Any) -> np.ndarray:
        return _readonly(v, 2, "values")

    @model_validator(mode="after")
    def _check(self) -> "LearnerPredictionMatrix":
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("预测矩阵含有非有限值")
        if self.task == "classification" and (self.values.min(initial=0.0) < 0 or self.values.max(initial=0.0) > 1):
            raise ConfigurationError("分类预测必须在 [0, 1] 内")
        return self

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_learners(self) -> int:
        return int(self.values.shape[1])

    def column(self, i: int) -> np.ndarray:
        return self.values[:, i]

    def aggregate(self) -> np.ndarray:
        """bagging 意义下的列均值"""
        return self.values.mean(axis=1)


# ==================== 工具变量 ====================
class LambdaEstimate(BaseModel):
    """λ̂ 及其组成部分"""
    model_config = ConfigDict(frozen=True)

    lambda_hat: float
    cov_z_e: float
    cov_xhat_e: float
    sigma_xhat: float = Field(gt=0)
    sigma_z: float = Field(gt=0)
    source: Literal["standard", "modified"] = "standard"
    pair: tuple[int, int] = (0, 1)
    zero_error: bool = False


class TransformedInstrument(BaseModel):
    """变换后的工具变量 Z̃ = σ_X̂·Z − λ̂·σ_Z·X̂"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    lambda_estimate: LambdaEstimate
    endogenous_index: int
    instrument_index: int

    @field_validator("values", mode="before")
    @classmethod
    def _values(cls, v: Any) -> np.ndarray:
        return _readonly(v, 1, "values")


class SelectionConfig(BaseModel):
    """工具变量选择配置"""
    model_config = ConfigDict(frozen=True)

    method: Literal["top_n", "pca", "lasso"] = "pca"
    n: int = Field(default=3, ge=1)
    lasso_alpha: float = Field(default=0.05, gt=0, lt=1)
    lasso_penalty_constant: float = Field(default=1.1, gt=0)
    lasso_penalty: Optional[float] = Field(default=None, ge=0)  # 直接指定 δ，覆盖规则


class SelectedInstruments(BaseModel):
    """选出的工具变量列"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    columns: np.ndarray
    labels: list[str]
    method: Literal["top_n", "pca", "lasso"]
    source_indices: list[int] = []
    fallback: bool = False
    warnings: list[str] = []
    explained_variance_ratio: list[float] = []  # 仅 pca

    @field_validator("columns", mode="before")
    @classmethod
    def _columns(cls, v: Any) -> np.ndarray:
        return _readonly(v, 2, "columns")

    @property
    def k(self) -> int:
        return int(self.columns.shape[1])


# ==================== 诊断 ====================
class PairCorrelation(BaseModel):
    """Corr(Z̃⁽ʲ⁾ᵢ − X, r)"""
    model_config = ConfigDict(frozen=True)

    i: int
    j: int
    corr: float


class DiagnosticResult(BaseModel):
    """外围特征诊断结果"""
    model_config = ConfigDict(frozen=True)

    pair_correlations: list[PairCorrelation]
    ts_observed: float = Field(ge=0, le=1)
    permutation_distribution: list[float] = []
    p_value: float = Field(default=1.0, gt=0, le=1)
    permutations: int = Field(default=0, ge=0)
    excluded_pairs: list[tuple[int, int]] = []

    def summary(self, max_pairs: Optional[int] = None) -> dict[str, Any]:
        """用于报告的字典；配对数超过 max_pairs 时省略逐对相关系数"""
        data = self.model_dump(exclude={"permutation_distribution"})
        if max_pairs is not None and len(self.pair_correlations) > max_pairs:
            data["pair_correlations"] = None
            data["pair_correlations_elided"] = len(self.pair_correlations)
        if self.permutation_distribution:
            dist = np.asarray(self.permutation_distribution)
            data["permutation_mean"] = float(dist.mean())
            data["permutation_q95"] = float(np.quantile(dist, 0.95))
        return data


class RelevanceExclusionSummary(BaseModel):
    """学习器与工具变量的相关性/排他性描述统计"""
    model_config = ConfigDict(frozen=True)

    learner_indices: list[int]
    relevance: list[float]
    exclusion: list[float]
    stage: Literal["before", "after"]

    @model_validator(mode="after")
    def _check(self) -> "RelevanceExclusionSummary":
        values = self.relevance + self.exclusion
        if any(v < 0 or v > 1 for v in values):
            raise ConfigurationError("相关性/排他性度量必须在 [0, 1] 内")
        return self

    @property
    def mean_relevance(self) -> float:
        return float(np.mean(self.relevance))

    @property
    def mean_exclusion(self) -> float:
        return float(np.mean(self.exclusion))


# ==================== 基准估计 ====================
class BenchmarkConfig(BaseModel):
    """基准估计量配置"""
    model_config = ConfigDict(frozen=True)

    estimator: Literal["biased", "unbiased", "regcal", "regcal_cf", "subset_trees"]
    subset_size: Optional[int] = Field(default=None, ge=1)
    subset_draws: int = Field(default=100, ge=1)
    n_learners: Optional[int] = None

    @model_validator(mode="after")
    def _check(self) -> "BenchmarkConfig":
        if self.estimator == "subset_trees":
            if self.subset_size is None:
                raise ConfigurationError("subset_trees 需要 subset_size")
            if self.n_learners is not None and self.subset_size >= self.n_learners:
                raise ConfigurationError(f"subset_size {self.subset_size} 必须小于 M={self.n_learners}")
        return self
