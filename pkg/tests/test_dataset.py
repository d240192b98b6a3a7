"""
数据模型与划分单元测试
"""
import numpy as np
import pytest

from dataset import (
    holdout_diagnostic, ingest_csv, make_partitioned, parse_schema,
    partition_labeled, resample_partitions, split_by_size, split_fold,
)
from errors import (
    ConfigurationError, CsvParseError, DataInputError, InvalidPartitionError, SchemaError, ShapeError,
)
from models import PartitionedDataset, RngStream, SampleSet
from utils import column_corr, sample_corr, sample_cov, validate_fold_count, validate_selection_params


@pytest.mark.unit
@pytest.mark.data
class TestRngStream:
    """随机数流测试"""

    def test_same_path_same_draws(self):
        """测试相同 (种子, 路径) 得到相同序列"""
        a = RngStream(master_seed=1).child(3, 4).generator().normal(size=5)
        b = RngStream(master_seed=1).child(3, 4).generator().normal(size=5)

        np.testing.assert_array_equal(a, b)

    def test_different_paths_differ(self):
        """测试不同路径的流不同"""
        root = RngStream(master_seed=1)

        assert not np.allclose(root.child(0).generator().normal(size=5), root.child(1).generator().normal(size=5))

    def test_child_appends_path(self):
        """测试子流路径逐层追加"""
        stream = RngStream(master_seed=5).child(1).child(2, 3)

        assert stream.stream_path == (1, 2, 3)
        assert stream.master_seed == 5


@pytest.mark.unit
@pytest.mark.data
class TestSampleSet:
    """样本集合测试"""

    def test_arrays_are_readonly(self, linear_samples):
        """测试数组只读"""
        with pytest.raises(ValueError):
            linear_samples.features[0, 0] = 1.0

    def test_shape_mismatch(self):
        """测试行数不一致"""
        with pytest.raises(ShapeError):
            SampleSet.from_arrays(features=np.zeros((3, 2)), outcomes=np.zeros(4))

    def test_non_finite_rejected(self):
        """测试非有限值"""
        with pytest.raises(ConfigurationError):
            SampleSet.from_arrays(features=np.zeros((3, 1)), outcomes=np.array([1.0, np.nan, 2.0]))

    def test_binary_label_check(self):
        """测试二值标签只能取 0/1"""
        with pytest.raises(ConfigurationError):
            SampleSet.from_arrays(
                features=np.zeros((3, 1)), outcomes=np.zeros(3), labels=np.array([0.0, 0.5, 1.0]), binary_label=True,
            )

    def test_concat_drops_labels_when_missing(self, linear_samples):
        """测试拼接时任一部分无标签则结果无标签"""
        merged = SampleSet.concat([linear_samples, linear_samples.without_labels()])

        assert merged.n == 2 * linear_samples.n
        assert merged.labels is None

    def test_require_labels(self, linear_samples):
        """测试缺少标签时报错"""
        with pytest.raises(ConfigurationError):
            linear_samples.without_labels().require_labels("D_test")


@pytest.mark.unit
@pytest.mark.data
class TestPartitions:
    """分区与折测试"""

    def test_fold_sizes_balanced(self, linear_samples, rng):
        """测试各折大小最多相差 1"""
        assignment = partition_labeled(linear_samples.take(np.arange(103)), 4, rng)
        sizes = np.bincount(list(assignment.values()))[1:]

        assert sizes.sum() == 103
        assert sizes.max() - sizes.min() <= 1

    def test_split_fold_is_complement(self, linear_samples, rng):
        """测试 D_train 与 D_test 互补"""
        assignment = partition_labeled(linear_samples, 5, rng)
        train, test = split_fold(linear_samples, assignment, 2)

        assert train.n + test.n == linear_samples.n
        assert np.intersect1d(train.ids, test.ids).size == 0

    def test_too_many_folds(self, linear_samples, rng):
        """测试样本不足 2K"""
        with pytest.raises(InvalidPartitionError):
            partition_labeled(linear_samples.take(np.arange(5)), 3, rng)

    def test_overlapping_partitions_rejected(self, linear_samples):
        """测试分区重叠"""
        with pytest.raises(InvalidPartitionError):
            PartitionedDataset(
                d_train=linear_samples.take(np.arange(0, 100)),
                d_test=linear_samples.take(np.arange(90, 150)),
                d_unlabel=linear_samples.take(np.arange(150, 300)).without_labels(),
            )

    def test_test_partition_needs_labels(self, linear_samples):
        """测试 D_test 必须有标签"""
        with pytest.raises(InvalidPartitionError):
            PartitionedDataset(
                d_train=linear_samples.take(np.arange(0, 100)),
                d_test=linear_samples.take(np.arange(100, 150)).without_labels(),
                d_unlabel=linear_samples.take(np.arange(150, 300)),
            )

    def test_make_partitioned_folds(self, linear_samples, rng):
        """测试第 1 折作为 D_test，折信息覆盖有标签样本"""
        pool = linear_samples.take(np.arange(200))
        unlabel = linear_samples.take(np.arange(200, 500)).without_labels()
        data = make_partitioned(pool, unlabel, 4, rng)

        assert data.d_test.n == 50
        assert set(data.fold_assignments) == set(pool.ids.tolist())
        assert {data.fold_assignments[int(i)] for i in data.d_test.ids} == {1}

    def test_holdout_diagnostic_fraction(self, linear_samples, rng):
        """测试诊断分区比例"""
        rest, diagnostic = holdout_diagnostic(linear_samples, rng, 0.2)

        assert diagnostic.n == 100
        assert rest.n == 400

    def test_split_by_size_bounds(self, linear_samples, rng):
        """测试划分大小越界"""
        with pytest.raises(InvalidPartitionError):
            split_by_size(linear_samples, linear_samples.n, rng)

    def test_resample_keeps_sizes_and_disjoint_ids(self, main_data, rng):
        """测试 bootstrap 重抽样保持各分区大小且 id 互斥"""
        resampled = resample_partitions(main_data, rng)

        assert resampled.d_train.n == main_data.d_train.n
        assert resampled.d_unlabel.n == main_data.d_unlabel.n
        assert resampled.fold_assignments is None
        all_ids = np.concatenate([resampled.d_train.ids, resampled.d_test.ids, resampled.d_unlabel.ids])
        assert np.unique(all_ids).size == all_ids.size


@pytest.mark.unit
@pytest.mark.data
class TestCsvIngest:
    """CSV 摄入测试"""

    def test_parse_schema(self):
        """测试列角色解析（无 '=' 的片段归入上一个角色）"""
        schema = parse_schema("y=out,x=lab,w=a,b,v=f1,f2,f3")

        assert schema.outcome == "out"
        assert schema.label == "lab"
        assert schema.controls == ["a", "b"]
        assert schema.features == ["f1", "f2", "f3"]

    def test_parse_schema_requires_outcome(self):
        """测试缺少结果列"""
        with pytest.raises(ConfigurationError):
            parse_schema("x=lab,v=f1")

    def test_parse_schema_unknown_role(self):
        """测试未知角色"""
        with pytest.raises(ConfigurationError):
            parse_schema("y=out,z=oops")

    def test_ingest_roundtrip(self, csv_files, main_data):
        """测试读取有标签文件"""
        labeled, _, schema = csv_files
        pool = ingest_csv(labeled, schema)

        assert pool.n == main_data.labeled_pool().n
        assert pool.has_labels
        assert pool.control_names == ["w1", "w2"]
        np.testing.assert_allclose(pool.outcomes, main_data.labeled_pool().outcomes)

    def test_ingest_without_label_column(self, csv_files):
        """测试无标签文件 X 为空"""
        _, unlabeled, schema = csv_files
        data = ingest_csv(unlabeled, schema, id_offset=10000)

        assert data.labels is None
        assert data.ids[0] == 10000

    def test_missing_column(self, csv_files):
        """测试缺少特征列"""
        labeled, _, _ = csv_files
        with pytest.raises(SchemaError):
            ingest_csv(labeled, "y=y,v=v1,nonexistent")

    def test_bad_value_reports_row(self, tmp_path):
        """测试非数值单元格报告行号和列名"""
        path = tmp_path / "bad.csv"
        path.write_text("y,v1\n1.0,2.0\n2.0,abc\n", encoding="utf-8")

        with pytest.raises(CsvParseError) as exc:
            ingest_csv(path, "y=y,v=v1")

        assert exc.value.row == 2
        assert exc.value.column == "v1"
        assert exc.value.exit_code == 4

    def test_missing_file(self, tmp_path):
        """测试文件不存在"""
        with pytest.raises(DataInputError):
            ingest_csv(tmp_path / "none.csv", "y=y,v=v1")


@pytest.mark.unit
@pytest.mark.data
class TestUtils:
    """统计量与校验函数测试"""

    def test_sample_cov_matches_numpy(self, gen):
        """测试样本协方差使用 n-1 分母"""
        a, b = gen.normal(size=50), gen.normal(size=50)

        assert sample_cov(a, b) == pytest.approx(np.cov(a, b, ddof=1)[0, 1])

    def test_corr_zero_variance(self):
        """测试常数向量相关系数为 0"""
        assert sample_corr(np.ones(10), np.arange(10.0)) == 0.0

    def test_column_corr(self, gen):
        """测试按列相关系数与逐列计算一致"""
        matrix, vector = gen.normal(size=(40, 3)), gen.normal(size=40)
        expected = [np.corrcoef(matrix[:, k], vector)[0, 1] for k in range(3)]

        np.testing.assert_allclose(column_corr(matrix, vector), expected)

    @pytest.mark.parametrize("k,pool,ok", [(1, 100, False), (4, 7, False), (4, 8, True)])
    def test_validate_fold_count(self, k, pool, ok):
        """测试折数校验"""
        assert validate_fold_count(k, pool)[0] is ok

    def test_validate_selection_params(self):
        """测试 n 上限为 M-1（lasso 不限制）"""
        assert validate_selection_params("pca", 3, 10)[0] is True
        assert validate_selection_params("top_n", 10, 10)[0] is False
        assert validate_selection_params("lasso", 50, 10)[0] is True
        assert validate_selection_params("ridge", 1, 10)[0] is False
