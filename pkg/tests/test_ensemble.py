"""
集成学习器单元测试
"""
import numpy as np
import pytest

from ensemble import (
    CartTree, LearnerConfig, grow_tree, load_model, predict_aggregate,
    predict_learners, save_model, train_cart, train_ensemble, tree_outputs,
)
from errors import ConfigurationError, DataInputError, ShapeError
from models import RngStream, SampleSet


@pytest.mark.unit
@pytest.mark.learners
class TestCart:
    """单棵 CART 测试"""

    def test_step_function_recovered(self):
        """测试阶跃函数被一次分裂精确拟合"""
        x = np.linspace(0, 1, 100).reshape(-1, 1)
        y = np.where(x[:, 0] > 0.5, 3.0, -1.0)
        tree = grow_tree(x, y, max_depth=3, min_leaf=5)

        np.testing.assert_allclose(tree.predict(x), y)
        assert tree.n_leaves == 2
        assert 0.49 < tree.threshold[0] < 0.52

    def test_constant_labels_single_leaf(self):
        """测试常数标签得到单叶子树"""
        data = SampleSet.from_arrays(features=np.arange(20.0), outcomes=np.zeros(20), labels=np.full(20, 2.5))
        tree = train_cart(data)

        assert tree.n_nodes == 1
        assert tree.depth() == 0
        np.testing.assert_allclose(tree.predict(np.array([[100.0]])), [2.5])

    def test_max_depth_respected(self, gen):
        """测试最大深度"""
        x = gen.uniform(size=(300, 3))
        tree = grow_tree(x, gen.normal(size=300), max_depth=3, min_leaf=2)

        assert tree.depth() <= 3

    def test_min_leaf_respected(self, gen):
        """测试每个叶子至少 min_leaf 个样本"""
        x = gen.uniform(size=(200, 2))
        tree = grow_tree(x, gen.normal(size=200), max_depth=10, min_leaf=7)
        counts = np.bincount(tree.apply(x), minlength=tree.n_nodes)

        assert counts[tree.feature < 0].min() >= 7

    def test_classification_leaves_in_unit_interval(self, gen):
        """测试分类树叶子为概率"""
        x = gen.uniform(size=(200, 2))
        y = (x[:, 0] + 0.1 * gen.normal(size=200) > 0.5).astype(float)
        tree = grow_tree(x, y, task="classification", max_depth=4, min_leaf=5)

        leaves = tree.value[tree.feature < 0]
        assert leaves.min() >= 0.0 and leaves.max() <= 1.0

    def test_too_few_samples(self):
        """测试样本少于 2×min_leaf"""
        with pytest.raises(ConfigurationError):
            grow_tree(np.zeros((5, 1)), np.zeros(5), min_leaf=5)

    def test_malformed_tree_rejected(self):
        """测试内部节点缺少子节点"""
        with pytest.raises(ConfigurationError):
            CartTree(feature=[0], threshold=[0.5], left=[-1], right=[-1], value=[1.0])


@pytest.mark.unit
@pytest.mark.learners
class TestEnsembleTraining:
    """集成训练与预测测试"""

    def test_bagging_shapes(self, main_model, main_data):
        """测试预测矩阵为 n×M，聚合为列均值"""
        matrix = predict_learners(main_model, main_data.d_test)

        assert matrix.values.shape == (main_data.d_test.n, 8)
        assert matrix.learner_kind == "individual"
        np.testing.assert_allclose(predict_aggregate(main_model, main_data.d_test), matrix.values.mean(axis=1))

    def test_bagging_deterministic(self, main_data, small_learner):
        """测试相同随机数流得到相同模型"""
        a = train_ensemble(main_data.d_train, small_learner, RngStream(master_seed=3))
        b = train_ensemble(main_data.d_train, small_learner, RngStream(master_seed=3))

        np.testing.assert_array_equal(tree_outputs(a, main_data.d_test), tree_outputs(b, main_data.d_test))

    def test_bagging_independent_of_jobs(self, main_data, small_learner):
        """测试结果与并行度无关"""
        serial = train_ensemble(main_data.d_train, small_learner, RngStream(master_seed=3), n_jobs=1)
        parallel = train_ensemble(main_data.d_train, small_learner, RngStream(master_seed=3), n_jobs=2)

        np.testing.assert_array_equal(tree_outputs(serial, main_data.d_test), tree_outputs(parallel, main_data.d_test))

    def test_boosting_cumulative_predictions(self, main_data):
        """测试 boosting 的学习器是累积模型，最后一列即完整模型"""
        config = LearnerConfig(technique="boosting", n_learners=10, max_depth=3)
        model = train_ensemble(main_data.d_train, config, RngStream(master_seed=4))
        matrix = predict_learners(model, main_data.d_test)
        outputs = tree_outputs(model, main_data.d_test)

        assert matrix.learner_kind == "cumulative"
        np.testing.assert_allclose(
            matrix.values[:, 0], model.init_value + model.learning_rate * outputs[:, 0],
        )
        np.testing.assert_allclose(predict_aggregate(model, main_data.d_test), matrix.values[:, -1])

    def test_boosting_reduces_training_error(self, main_data):
        """测试 boosting 训练误差随学习器数下降"""
        config = LearnerConfig(technique="boosting", n_learners=30, max_depth=3)
        model = train_ensemble(main_data.d_train, config, RngStream(master_seed=4))
        values = predict_learners(model, main_data.d_train).values
        mse = ((values - main_data.d_train.labels[:, None]) ** 2).mean(axis=0)

        assert mse[-1] < mse[0]

    def test_classification_requires_binary(self, main_data):
        """测试分类任务标签必须为 0/1"""
        config = LearnerConfig(task="classification", n_learners=4)

        with pytest.raises(ConfigurationError):
            train_ensemble(main_data.d_train, config, RngStream(master_seed=1))

    def test_needs_two_learners(self, main_data):
        """测试至少两个学习器"""
        with pytest.raises(ConfigurationError):
            train_ensemble(main_data.d_train, LearnerConfig(n_learners=1), RngStream(master_seed=1))

    def test_feature_dimension_checked(self, main_model):
        """测试预测时特征维度不符"""
        with pytest.raises(ShapeError):
            predict_learners(main_model, np.zeros((3, 2)))

    @pytest.mark.parametrize("task,p,expected", [("regression", 10, 4), ("classification", 10, 4), ("regression", 2, 1)])
    def test_feature_subsample_rule(self, task, p, expected):
        """测试每次分裂的候选特征数规则"""
        assert LearnerConfig(task=task).subsample(p) == expected


@pytest.mark.unit
@pytest.mark.learners
class TestModelCache:
    """模型缓存测试"""

    def test_save_load_predictions_identical(self, tmp_path, main_model, main_data):
        """测试保存后读取的模型预测完全一致"""
        path = save_model(main_model, tmp_path / "model.json")
        loaded = load_model(path)

        assert loaded.n_learners == main_model.n_learners
        np.testing.assert_array_equal(
            predict_learners(loaded, main_data.d_unlabel).values,
            predict_learners(main_model, main_data.d_unlabel).values,
        )

    def test_boosting_roundtrip_keeps_link(self, tmp_path, main_data):
        """测试 boosting 模型的初值与学习率被保存"""
        model = train_ensemble(
            main_data.d_train, LearnerConfig(technique="boosting", n_learners=5, max_depth=2), RngStream(master_seed=2),
        )
        loaded = load_model(save_model(model, tmp_path / "boost.json"))

        assert loaded.init_value == pytest.approx(model.init_value)
        np.testing.assert_allclose(predict_aggregate(loaded, main_data.d_test), predict_aggregate(model, main_data.d_test))

    def test_wrong_format_rejected(self, tmp_path):
        """测试格式头不符"""
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other", "version": 1}', encoding="utf-8")

        with pytest.raises(DataInputError):
            load_model(path)
