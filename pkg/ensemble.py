"""
第一阶段集成学习器 - CART 决策树、bagging 随机森林、梯度提升树

逐学习器预测矩阵是构造工具变量的原料：
    bagging  → 第 i 列是第 i 棵树的预测
    boosting → 第 i 列是前 i 棵树组成的累积学习器（分类任务为概率）
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings
from scipy.special import expit, logit

from errors import ConfigurationError, DataInputError, ShapeError
from models import LearnerPredictionMatrix, RngStream, SampleSet, Task
from tasks import run_parallel

logger = logging.getLogger(__name__)

MODEL_FORMAT = "ensembleiv-model"
MODEL_VERSION = 1


class EnsembleSettings(BaseSettings):
    """集成学习器默认超参数"""
    n_learners: int = 100
    max_depth: int = 25
    min_leaf: int = 5
    boosting_depth: int = 6
    learning_rate: float = 0.1
    feature_subsample: Optional[int] = Field(default=None, ge=1)  # 缺省: 分类 ⌈√p⌉，回归 ⌈p/3⌉

    class Config:
        env_file = ".env"
        env_prefix = "ENSEMBLE_"
        extra = "ignore"


_ensemble_settings: Optional[EnsembleSettings] = None


def get_ensemble_settings() -> EnsembleSettings:
    """
    获取集成学习器配置（单例模式）

    Returns:
        EnsembleSettings: 配置实例
    """
    global _ensemble_settings
    if _ensemble_settings is None:
        _ensemble_settings = EnsembleSettings()
    return _ensemble_settings


def load_ensemble_settings(env_file: Optional[str] = None) -> EnsembleSettings:
    """
    从配置文件重新读取集成学习器配置（--config），缺省读取 .env

    Returns:
        EnsembleSettings: 新的单例
    """
    global _ensemble_settings
    _ensemble_settings = EnsembleSettings(_env_file=env_file or ".env")
    return _ensemble_settings


class LearnerConfig(BaseModel):
    """集成学习器超参数；未指定的项取 EnsembleSettings 默认值"""
    model_config = ConfigDict(frozen=True)

    technique: Literal["bagging", "boosting"] = "bagging"
    task: Task = "regression"
    n_learners: int = Field(default_factory=lambda: get_ensemble_settings().n_learners)
    max_depth: Optional[int] = Field(default=None, ge=1)
    min_leaf: int = Field(default_factory=lambda: get_ensemble_settings().min_leaf, ge=1)
    feature_subsample: Optional[int] = Field(default=None, ge=1)
    learning_rate: float = Field(default_factory=lambda: get_ensemble_settings().learning_rate, gt=0, le=1)

    def depth(self) -> int:
        if self.max_depth is not None:
            return self.max_depth
        settings = get_ensemble_settings()
        return settings.boosting_depth if self.technique == "boosting" else settings.max_depth

    def subsample(self, n_features: int) -> int:
        """每次分裂抽取的特征数：分类 ⌈√p⌉，回归 ⌈p/3⌉"""
        subsample = self.feature_subsample
        if subsample is None:
            subsample = get_ensemble_settings().feature_subsample
        if subsample is not None:
            return min(subsample, n_features)
        if self.task == "classification":
            return max(1, math.ceil(math.sqrt(n_features)))
        return max(1, math.ceil(n_features / 3))


# ==================== CART ====================
class CartTree(BaseModel):
    """
    数组形式的二叉树（节点按先序排列）

    feature[k] < 0 表示叶子；内部节点 x[feature] <= threshold 走左子树。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    task: Task = "regression"

    @field_validator("feature", "left", "right", mode="before")
    @classmethod
    def _int_array(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=np.int64).reshape(-1)
        arr.setflags(write=False)
        return arr

    @field_validator("threshold", "value", mode="before")
    @classmethod
    def _float_array(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=float).reshape(-1)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _check(self) -> "CartTree":
        size = self.feature.shape[0]
        if size == 0:
            raise ConfigurationError("树至少需要一个节点")
        for arr in (self.threshold, self.left, self.right, self.value):
            if arr.shape[0] != size:
                raise ShapeError("树的节点数组长度不一致")
        internal = self.feature >= 0
        if np.any(internal & ((self.left < 0) | (self.right < 0))):
            raise ConfigurationError("内部节点必须恰好有两个子节点")
        if np.any(~internal & ((self.left >= 0) | (self.right >= 0))):
            raise ConfigurationError("叶子节点不能有子节点")
        leaves = self.value[~internal]
        if not np.all(np.isfinite(leaves)):
            raise ConfigurationError("叶子预测值必须有限")
        if self.task == "classification" and (leaves.min() < 0 or leaves.max() > 1):
            raise ConfigurationError("分类树叶子必须在 [0, 1] 内")
        return self

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, features: np.ndarray) -> np.ndarray:
        """每行落入的叶子节点编号"""
        node = np.zeros(features.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = features[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[node] >= 0
        return node

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.value[self.apply(features)]

    def depth(self) -> int:
        """树的深度（单叶子为 0）"""
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                depths[self.left[k]] = depths[k] + 1
                depths[self.right[k]] = depths[k] + 1
        return int(depths.max())

    def with_values(self, values: np.ndarray, task: Optional[Task] = None) -> "CartTree":
        """替换节点取值（boosting 的 Newton 叶子更新）"""
        return CartTree(
            feature=self.feature, threshold=self.threshold,
            left=self.left, right=self.right,
            value=values, task=task or self.task,
        )


class _TreeGrower:
    """贪心二叉分裂，先序建树"""

    def __init__(
        self,
        features: np.ndarray,
        target: np.ndarray,
        task: Task,
        max_depth: int,
        min_leaf: int,
        n_candidates: int,
        gen: Optional[np.random.Generator],
    ):
        self.features = features
        self.target = target
        self.task = task
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.n_candidates = n_candidates
        self.gen = gen
        self.nodes: list[list] = []  # [feature, threshold, left, right, value]

    def grow(self) -> CartTree:
        self._build(np.arange(self.target.shape[0]), 0)
        feature, threshold, left, right, value = zip(*self.nodes)
        return CartTree(
            feature=feature, threshold=threshold, left=left,
            right=right, value=value, task=self.task,
        )

    def _build(self, rows: np.ndarray, depth: int) -> int:
        node = len(self.nodes)
        y = self.target[rows]
        self.nodes.append([-1, 0.0, -1, -1, float(y.mean())])
        if depth >= self.max_depth or rows.shape[0] < 2 * self.min_leaf or np.all(y == y[0]):
            return node
        split = self._best_split(rows, y)
        if split is None:
            return node
        feature, threshold = split
        go_left = self.features[rows, feature] <= threshold
        self.nodes[node][0] = feature
        self.nodes[node][1] = threshold
        self.nodes[node][2] = self._build(rows[go_left], depth + 1)
        self.nodes[node][3] = self._build(rows[~go_left], depth + 1)
        return node

    def _candidate_features(self) -> np.ndarray:
        p = self.features.shape[1]
        if self.gen is None or self.n_candidates >= p:
            return np.arange(p)
        return np.sort(self.gen.choice(p, size=self.n_candidates, replace=False))

    def _best_split(self, rows: np.ndarray, y: np.ndarray) -> Optional[tuple[int, float]]:
        n = rows.shape[0]
        total = y.sum()
        positions = np.arange(self.min_leaf - 1, n - self.min_leaf)
        n_left = positions + 1.0
        n_right = n - n_left
        if self.task == "classification":
            parent = n * _gini(total, n)
        else:
            parent = float(np.sum((y - y.mean()) ** 2))
        min_gain = 1e-12 * (1.0 + parent)

        best_gain = min_gain
        best: Optional[tuple[int, float]] = None
        for f in self._candidate_features():
            x = self.features[rows, f]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            valid = xs[positions] < xs[positions + 1]
            if not valid.any():
                continue
            csum = np.cumsum(y[order])
            s_left = csum[positions]
            s_right = total - s_left
            if self.task == "classification":
                gain = parent - n_left * _gini(s_left, n_left) - n_right * _gini(s_right, n_right)
            else:
                # SSE 下降 = s_L²/n_L + s_R²/n_R − s²/n
                gain = s_left ** 2 / n_left + s_right ** 2 / n_right - total ** 2 / n
            gain = np.where(valid, gain, -np.inf)
            k = int(np.argmax(gain))
            if gain[k] > best_gain:
                best_gain = float(gain[k])
                best = (int(f), float((xs[positions[k]] + xs[positions[k] + 1]) / 2.0))
        return best


def _gini(ones, count):
    """二分类 Gini 不纯度"""
    p = ones / count
    return 1.0 - p ** 2 - (1.0 - p) ** 2


def grow_tree(
    features: np.ndarray,
    target: np.ndarray,
    task: Task = "regression",
    max_depth: int = 25,
    min_leaf: int = 5,
    feature_subsample: Optional[int] = None,
    gen: Optional[np.random.Generator] = None,
) -> CartTree:
    """
    在数组上训练一棵 CART

    Args:
        features: n×p 特征
        target: 目标（分类为 0/1）
        task: regression 用方差下降，classification 用 Gini 下降
        max_depth: 最大深度
        min_leaf: 叶子最少样本数
        feature_subsample: 每次分裂抽取的候选特征数，None 表示全部
        gen: 特征抽样用的随机数发生器

    Returns:
        CartTree
    """
    features = np.asarray(features, dtype=float)
    target = np.asarray(target, dtype=float)
    if target.shape[0] < 2 * min_leaf:
        raise ConfigurationError(f"样本数 {target.shape[0]} 少于 2×min_leaf={2 * min_leaf}")
    n_candidates = features.shape[1] if feature_subsample is None else feature_subsample
    return _TreeGrower(features, target, task, max_depth, min_leaf, n_candidates, gen).grow()


def train_cart(
    data: SampleSet,
    task: Task = "regression",
    max_depth: int = 25,
    min_leaf: int = 5,
    feature_subsample: Optional[int] = None,
    rng: Optional[RngStream] = None,
) -> CartTree:
    """
    用样本集合的 (V, X) 训练一棵 CART

    常数标签得到单叶子树。
    """
    labels = data.require_labels("训练数据")
    gen = rng.generator() if rng is not None else None
    return grow_tree(data.features, labels, task, max_depth, min_leaf, feature_subsample, gen)


# ==================== 集成模型 ====================
class EnsembleModel(BaseModel):
    """训练好的集成模型（不可变）"""
    model_config = ConfigDict(frozen=True)

    technique: Literal["bagging", "boosting"]
    task: Task
    trees: list[CartTree]
    n_features: int
    learning_rate: float = Field(default=1.0, gt=0, le=1)
    init_value: float = 0.0
    feature_subsample: Optional[int] = None

    @model_validator(mode="after")
    def _check(self) -> "EnsembleModel":
        if len(self.trees) < 2:
            raise ConfigurationError(f"集成至少需要 2 个学习器，当前 {len(self.trees)}")
        return self

    @property
    def n_learners(self) -> int:
        return len(self.trees)


def _fit_bagged_tree(job: tuple) -> CartTree:
    features, labels, task, depth, min_leaf, subsample, stream = job
    gen = stream.generator()
    rows = gen.integers(0, labels.shape[0], size=labels.shape[0])
    return grow_tree(features[rows], labels[rows], task, depth, min_leaf, subsample, gen)


def _fit_boosting(
    features: np.ndarray,
    labels: np.ndarray,
    config: LearnerConfig,
) -> tuple[float, list[CartTree]]:
    """平方损失 / logistic 损失梯度提升；每棵树拟合当前负梯度"""
    if config.task == "classification":
        base = float(np.clip(labels.mean(), 1e-6, 1 - 1e-6))
        init = float(logit(base))
    else:
        init = float(labels.mean())
    link = np.full(labels.shape[0], init)
    trees = []
    for t in range(config.n_learners):
        if config.task == "classification":
            prob = expit(link)
            residual = labels - prob
            tree = grow_tree(features, residual, "regression", config.depth(), config.min_leaf)
            # Newton 叶子: Σr / Σp(1−p)
            leaves = tree.apply(features)
            num = np.bincount(leaves, weights=residual, minlength=tree.n_nodes)
            den = np.bincount(leaves, weights=prob * (1 - prob), minlength=tree.n_nodes)
            values = np.array(tree.value, copy=True)
            touched = np.unique(leaves)
            values[touched] = num[touched] / np.maximum(den[touched], 1e-12)
            tree = tree.with_values(values)
        else:
            residual = labels - link
            tree = grow_tree(features, residual, "regression", config.depth(), config.min_leaf)
        link = link + config.learning_rate * tree.predict(features)
        trees.append(tree)
    return init, trees


def train_ensemble(
    data: SampleSet,
    config: LearnerConfig,
    rng: RngStream,
    n_jobs: Optional[int] = 1,
) -> EnsembleModel:
    """
    训练含 M 个学习器的集成模型

    Args:
        data: 有标签训练数据
        config: 超参数（technique / task / M ...）
        rng: 随机数流；第 t 棵 bagging 树使用子流 t
        n_jobs: bagging 树并行度（boosting 必然串行）

    Returns:
        EnsembleModel
    """
    if config.n_learners < 2:
        raise ConfigurationError(f"集成至少需要 2 个学习器，当前 {config.n_learners}")
    labels = data.require_labels("训练数据")
    if data.n == 0:
        raise ConfigurationError("训练数据为空")
    if config.task == "classification" and not np.all((labels == 0) | (labels == 1)):
        raise ConfigurationError("分类任务的标签必须是 0/1")

    if config.technique == "bagging":
        subsample = config.subsample(data.n_features)
        jobs = [
            (data.features, labels, config.task, config.depth(), config.min_leaf, subsample, rng.child(t))
            for t in range(config.n_learners)
        ]
        trees = run_parallel(_fit_bagged_tree, jobs, n_jobs=n_jobs)
        model = EnsembleModel(
            technique="bagging", task=config.task, trees=trees,
            n_features=data.n_features, feature_subsample=subsample,
        )
    else:
        init, trees = _fit_boosting(data.features, labels, config)
        model = EnsembleModel(
            technique="boosting", task=config.task, trees=trees,
            n_features=data.n_features, learning_rate=config.learning_rate, init_value=init,
        )
    logger.debug(f"🌲 {config.technique} 训练完成: M={config.n_learners}, n={data.n}")
    return model


# ==================== 预测 ====================
def _feature_matrix(model: EnsembleModel, data: Union[SampleSet, np.ndarray]) -> np.ndarray:
    features = data.features if isinstance(data, SampleSet) else np.asarray(data, dtype=float)
    if features.ndim != 2 or features.shape[1] != model.n_features:
        raise ShapeError(f"特征维度 {features.shape} 与模型的 {model.n_features} 不一致")
    return features


def tree_outputs(model: EnsembleModel, data: Union[SampleSet, np.ndarray]) -> np.ndarray:
    """每棵树的原始输出 (n×M)"""
    features = _feature_matrix(model, data)
    return np.column_stack([tree.predict(features) for tree in model.trees])


def predict_learners(model: EnsembleModel, data: Union[SampleSet, np.ndarray]) -> LearnerPredictionMatrix:
    """
    逐学习器预测矩阵

    Args:
        model: 集成模型
        data: 样本集合或特征矩阵

    Returns:
        LearnerPredictionMatrix: bagging 为单树预测，boosting 为累积学习器预测
    """
    outputs = tree_outputs(model, data)
    if model.technique == "bagging":
        return LearnerPredictionMatrix(values=outputs, learner_kind="individual", task=model.task)
    link = model.init_value + model.learning_rate * np.cumsum(outputs, axis=1)
    values = expit(link) if model.task == "classification" else link
    return LearnerPredictionMatrix(values=values, learner_kind="cumulative", task=model.task)


def predict_aggregate(model: EnsembleModel, data: Union[SampleSet, np.ndarray]) -> np.ndarray:
    """聚合预测：bagging 为列均值，boosting 为完整模型"""
    matrix = predict_learners(model, data)
    if model.technique == "bagging":
        return matrix.aggregate()
    return np.array(matrix.values[:, -1])


# ==================== 模型缓存 ====================
def _encode_tree(tree: CartTree) -> dict:
    # 节点已经是先序，只需 (feature, threshold, value)
    nodes = [
        [int(f), float(t), float(v)]
        for f, t, v in zip(tree.feature, tree.threshold, tree.value)
    ]
    return {"task": tree.task, "nodes": nodes}


def _decode_tree(payload: dict) -> CartTree:
    nodes = payload["nodes"]
    feature = np.array([n[0] for n in nodes], dtype=np.int64)
    left = np.full(len(nodes), -1, dtype=np.int64)
    right = np.full(len(nodes), -1, dtype=np.int64)

    def walk(pos: int) -> int:
        if pos >= len(nodes):
            raise DataInputError("模型文件中的树编码不完整")
        if feature[pos] < 0:
            return pos + 1
        left[pos] = pos + 1
        right[pos] = walk(pos + 1)
        return walk(right[pos])

    if walk(0) != len(nodes):
        raise DataInputError("模型文件中的树编码有多余节点")
    return CartTree(
        feature=feature,
        threshold=[n[1] for n in nodes],
        left=left, right=right,
        value=[n[2] for n in nodes],
        task=payload["task"],
    )


def save_model(model: EnsembleModel, path: Union[str, Path]) -> Path:
    """
    保存模型为带版本头的 JSON 文本

    Returns:
        Path: 写入路径
    """
    path = Path(path)
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "technique": model.technique,
        "task": model.task,
        "n_features": model.n_features,
        "learning_rate": model.learning_rate,
        "init_value": model.init_value,
        "feature_subsample": model.feature_subsample,
        "trees": [_encode_tree(t) for t in model.trees],
    }
    try:
        path.write_text(json.dumps(payload), encoding="utf-8")
    except OSError as e:
        raise DataInputError(f"无法写入模型 {path}: {e}") from e
    return path


def load_model(path: Union[str, Path]) -> EnsembleModel:
    """读取 save_model 写出的模型"""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataInputError(f"无法读取模型 {path}: {e}") from e
    if payload.get("format") != MODEL_FORMAT or payload.get("version") != MODEL_VERSION:
        raise DataInputError(f"不支持的模型格式: {payload.get('format')} v{payload.get('version')}")
    return EnsembleModel(
        technique=payload["technique"],
        task=payload["task"],
        n_features=payload["n_features"],
        learning_rate=payload["learning_rate"],
        init_value=payload["init_value"],
        feature_subsample=payload["feature_subsample"],
        trees=[_decode_tree(t) for t in payload["trees"]],
    )
