"""
Pytest配置和共享fixtures
"""
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# 添加项目根目录到Python路径
sys.path.insert(0, str(Path(__file__).parent.parent))

from ensemble import LearnerConfig, train_ensemble
from models import LearnerPredictionMatrix, RngStream, SampleSet, SecondPhaseSpec
from simulation import (
    MainDgpConfig, PeripheralDgpConfig, generate_main_dgp, generate_peripheral_dgp, main_spec,
)


# ==================== 随机数 ====================
@pytest.fixture
def rng() -> RngStream:
    """固定种子的主随机数流"""
    return RngStream(master_seed=12345)


@pytest.fixture
def gen() -> np.random.Generator:
    """直接抽样用的 numpy Generator"""
    return np.random.default_rng(2024)


# ==================== 主实验数据 ====================
@pytest.fixture(scope="session")
def small_learner() -> LearnerConfig:
    """小规模 bagging 配置（测试速度优先）"""
    return LearnerConfig(technique="bagging", task="regression", n_learners=8, max_depth=6, min_leaf=5)


@pytest.fixture(scope="session")
def main_config() -> MainDgpConfig:
    return MainDgpConfig(n_label=240, n_unlabel=480)


@pytest.fixture(scope="session")
def main_data(main_config):
    """主实验 DGP 分区数据集（K=4）"""
    return generate_main_dgp(main_config, RngStream(master_seed=7))


@pytest.fixture(scope="session")
def second_spec(main_config) -> SecondPhaseSpec:
    return main_spec(main_config)


@pytest.fixture(scope="session")
def main_model(main_data, small_learner):
    """D_train 上训练好的小集成"""
    return train_ensemble(main_data.d_train, small_learner, RngStream(master_seed=8))


# ==================== 外围特征数据 ====================
@pytest.fixture(scope="session")
def peripheral_data():
    """σ=0.3 的外围特征数据（train/test/diagnostic = 3:1:1）"""
    return generate_peripheral_dgp(PeripheralDgpConfig(sigma=0.3, n_total=1500), RngStream(master_seed=9))


# ==================== 合成预测矩阵 ====================
@pytest.fixture
def synthetic_predictions(gen):
    """
    构造 X 与 M 个带共享误差的学习器预测

    Returns:
        (x, 预测矩阵)
    """
    n, m = 400, 6
    x = gen.normal(size=n)
    shared = gen.normal(0.0, 0.4, size=n)
    values = x[:, None] + shared[:, None] + gen.normal(0.0, 0.5, size=(n, m))
    return x, LearnerPredictionMatrix(values=values)


@pytest.fixture
def linear_samples(gen) -> SampleSet:
    """Y = 1 + 2·X + 0.5·W + ε 的有标签样本"""
    n = 500
    x = gen.normal(size=n)
    w = gen.normal(size=n)
    y = 1.0 + 2.0 * x + 0.5 * w + gen.normal(0.0, 0.5, size=n)
    return SampleSet.from_arrays(
        features=np.column_stack([x + gen.normal(0.0, 0.3, size=n), gen.normal(size=n)]),
        outcomes=y, labels=x, controls=w, feature_names=["f1", "f2"], control_names=["w"],
    )


# ==================== CSV 文件 ====================
@pytest.fixture
def csv_files(tmp_path, main_data):
    """
    把主实验数据写成有标签 / 无标签两个 CSV

    Returns:
        (labeled 路径, unlabeled 路径, schema 字符串)
    """
    def frame(part: SampleSet, with_label: bool) -> pd.DataFrame:
        data = {f"v{k + 1}": part.features[:, k] for k in range(part.n_features)}
        data["w1"] = part.controls[:, 0]
        data["w2"] = part.controls[:, 1]
        data["y"] = part.outcomes
        if with_label:
            data["x"] = part.labels
        return pd.DataFrame(data)

    labeled = tmp_path / "labeled.csv"
    unlabeled = tmp_path / "unlabeled.csv"
    frame(main_data.labeled_pool(), True).to_csv(labeled, index=False)
    frame(main_data.d_unlabel, False).to_csv(unlabeled, index=False)
    features = ",".join(f"v{k + 1}" for k in range(main_data.d_train.n_features))
    return labeled, unlabeled, f"y=y,x=x,w=w1,w2,v={features}"
