"""
基准估计量

- biased: 直接把聚合预测当作 MLV
- unbiased: 只在有标签数据上用真实 X
- regcal / regcal_cf: 回归校准（可交叉拟合）
- subset_trees: 以随机树子集的平均预测代替单个学习器，再走 EnsembleIV
"""
import logging
from typing import Optional

import numpy as np

from ensemble import EnsembleModel, LearnerConfig, predict_aggregate, tree_outputs
from ensemble_iv import CrossFitFold, average_estimates, ensembleiv_from_predictions, plan_crossfit
from errors import ConfigurationError
from models import (
    BenchmarkConfig, CoefficientEstimate, DesignMatrix, LearnerPredictionMatrix,
    PartitionedDataset, RngStream, SampleSet, SecondPhaseSpec, SelectionConfig,
)
from regression import fit_ols, fit_second_phase, second_phase_design
from tasks import run_parallel

logger = logging.getLogger(__name__)


def _tag(estimate: CoefficientEstimate, estimator: str, **extra) -> CoefficientEstimate:
    return estimate.model_copy(update={
        "estimator": estimator,
        "diagnostics": {**estimate.diagnostics, **extra},
    })


# ==================== Biased / Unbiased ====================
def fit_biased(model: EnsembleModel, d_unlabel: SampleSet, spec: SecondPhaseSpec) -> CoefficientEstimate:
    """
    以聚合预测作为 MLV 在 D_unlabel 上回归

    Args:
        model: 训练好的集成模型
        d_unlabel: 无标签样本（Y、W 已知）
        spec: 第二阶段设定

    Returns:
        CoefficientEstimate: estimator="biased"
    """
    xhat = predict_aggregate(model, d_unlabel)
    design = second_phase_design(xhat, d_unlabel.controls, spec)
    return _tag(fit_second_phase(design, d_unlabel.outcomes, spec), "biased")


def fit_unbiased(pool: SampleSet, spec: SecondPhaseSpec) -> CoefficientEstimate:
    """
    在有标签样本池上用真实 X 回归

    Args:
        pool: 有标签样本
        spec: 第二阶段设定

    Returns:
        CoefficientEstimate: estimator="unbiased"
    """
    design = second_phase_design(pool.require_labels("有标签样本池"), pool.controls, spec)
    return _tag(fit_second_phase(design, pool.outcomes, spec), "unbiased")


# ==================== 回归校准 ====================
def calibration_design(xhat: np.ndarray, controls: np.ndarray, control_names: list[str]) -> DesignMatrix:
    """校准模型设计矩阵 [1, X̂, W]"""
    columns = [("xhat", np.asarray(xhat, dtype=float))]
    controls = np.asarray(controls, dtype=float).reshape(len(xhat), -1)
    columns += [(name, controls[:, c]) for c, name in enumerate(control_names)]
    return DesignMatrix.build(columns, intercept=True)


def _calibrate_once(
    model: EnsembleModel,
    d_test: SampleSet,
    d_unlabel: SampleSet,
    spec: SecondPhaseSpec,
) -> CoefficientEstimate:
    calib = fit_ols(
        calibration_design(predict_aggregate(model, d_test), d_test.controls, spec.control_names),
        d_test.require_labels("D_test"),
    )
    calibrated = calib.predict(
        calibration_design(predict_aggregate(model, d_unlabel), d_unlabel.controls, spec.control_names)
    )
    design = second_phase_design(calibrated, d_unlabel.controls, spec)
    return _tag(
        fit_second_phase(design, d_unlabel.outcomes, spec), "regcal",
        calibration_coef=calib.point, calibration_names=calib.names,
    )


def regression_calibration(
    model: Optional[EnsembleModel],
    d_test: Optional[SampleSet],
    d_unlabel: SampleSet,
    spec: SecondPhaseSpec,
    crossfit: bool = False,
    k: Optional[int] = None,
    pool: Optional[SampleSet] = None,
    learner_config: Optional[LearnerConfig] = None,
    rng: Optional[RngStream] = None,
    plan: Optional[list[CrossFitFold]] = None,
    n_jobs: Optional[int] = 1,
) -> CoefficientEstimate:
    """
    回归校准

    在 D_test 上用 OLS 拟合 X ~ 1 + X̂_aggregate + W，把 D_unlabel 上的校准值作为 MLV
    代入第二阶段。crossfit=True 时在每一折重复并对估计取平均。

    Args:
        model: D_train 上训练好的集成模型（非交叉拟合时必需）
        d_test: 校准数据（非交叉拟合时必需）
        d_unlabel: 无标签样本
        spec: 第二阶段设定
        crossfit: 是否交叉拟合
        k: 折数（交叉拟合且未给出 plan 时）
        pool: 有标签样本池（交叉拟合且未给出 plan 时）
        learner_config: 集成超参数（同上）
        rng: 随机数流（同上）
        plan: 预先训练好的折计划
        n_jobs: 并行度

    Returns:
        CoefficientEstimate: estimator 为 regcal 或 regcal_cf
    """
    if not crossfit:
        if model is None or d_test is None:
            raise ConfigurationError("回归校准需要 model 和 d_test")
        return _calibrate_once(model, d_test, d_unlabel, spec)
    if plan is None:
        if pool is None or k is None or learner_config is None or rng is None:
            raise ConfigurationError("交叉拟合回归校准需要 plan，或 pool/k/learner_config/rng")
        plan = plan_crossfit(pool, k, learner_config, rng, n_jobs=n_jobs)
    estimates = [_calibrate_once(fold.model, fold.test, d_unlabel, spec) for fold in plan]
    return average_estimates(estimates, "regcal_cf", {"folds": len(plan), "crossfit": True})


# ==================== 树子集 ====================
def _subset_column(job: tuple) -> np.ndarray:
    outputs, subset_size, stream = job
    chosen = stream.generator().choice(outputs.shape[1], size=subset_size, replace=False)
    return outputs[:, np.sort(chosen)].mean(axis=1)


def subset_tree_predictions(
    model: EnsembleModel,
    subset_size: int,
    subset_draws: int,
    data: SampleSet,
    rng: RngStream,
    n_jobs: Optional[int] = 1,
) -> LearnerPredictionMatrix:
    """
    树子集预测矩阵：每列是一组随机抽取（不放回）的树的平均预测

    Args:
        model: bagging 集成模型
        subset_size: 每个子集的树数
        subset_draws: 列数
        data: 预测样本
        rng: 随机数流；第 c 列使用子流 c（D_test 与 D_unlabel 用同一 rng 得到同一组子集）
        n_jobs: 并行度

    Returns:
        LearnerPredictionMatrix: learner_kind="subset"
    """
    if model.technique != "bagging":
        raise ConfigurationError("树子集模式只支持 bagging 模型")
    if subset_size > model.n_learners:
        raise ConfigurationError(f"subset_size {subset_size} 超过 M={model.n_learners}")
    if subset_size == model.n_learners:
        logger.warning("⚠️ subset_size = M，每一列都等于聚合预测")
    if subset_draws < 2:
        raise ConfigurationError(f"subset_draws 必须 ≥ 2，当前 {subset_draws}")
    outputs = tree_outputs(model, data)
    jobs = [(outputs, subset_size, rng.child(c)) for c in range(subset_draws)]
    columns = run_parallel(_subset_column, jobs, n_jobs=n_jobs, prefer="threads")
    return LearnerPredictionMatrix(values=np.column_stack(columns), learner_kind="subset", task=model.task)


def subset_tree_ensembleiv(
    dataset: PartitionedDataset,
    model: EnsembleModel,
    spec: SecondPhaseSpec,
    subset_size: int,
    subset_draws: int,
    rng: RngStream,
    selection: Optional[SelectionConfig] = None,
    n_jobs: Optional[int] = 1,
) -> CoefficientEstimate:
    """以树子集预测作为学习器执行 EnsembleIV"""
    pred_test = subset_tree_predictions(model, subset_size, subset_draws, dataset.d_test, rng, n_jobs)
    pred_unlabel = subset_tree_predictions(model, subset_size, subset_draws, dataset.d_unlabel, rng, n_jobs)
    estimate = ensembleiv_from_predictions(
        pred_test, dataset.d_test.require_labels("D_test"), pred_unlabel, dataset.d_unlabel,
        spec, selection, n_jobs=n_jobs,
    )
    return _tag(estimate, "subset_trees", subset_size=subset_size, subset_draws=subset_draws)


# ==================== 统一入口 ====================
def run_benchmark(
    config: BenchmarkConfig,
    dataset: PartitionedDataset,
    model: EnsembleModel,
    spec: SecondPhaseSpec,
    rng: RngStream,
    selection: Optional[SelectionConfig] = None,
    plan: Optional[list[CrossFitFold]] = None,
    k: Optional[int] = None,
    learner_config: Optional[LearnerConfig] = None,
    n_jobs: Optional[int] = 1,
) -> CoefficientEstimate:
    """
    按 BenchmarkConfig 计算一个基准估计

    Args:
        config: 基准配置
        dataset: 分区数据集
        model: D_train 上训练好的集成模型
        spec: 第二阶段设定
        rng: 随机数流（交叉拟合训练与树子集抽样）
        selection: 树子集模式的工具变量选择
        plan: 共享的交叉拟合计划
        k: 交叉拟合折数
        learner_config: 交叉拟合训练超参数
        n_jobs: 并行度
    """
    if config.n_learners is not None and config.n_learners != model.n_learners:
        raise ConfigurationError(f"BenchmarkConfig.n_learners={config.n_learners} 与模型 M={model.n_learners} 不一致")
    if config.estimator == "biased":
        return fit_biased(model, dataset.d_unlabel, spec)
    if config.estimator == "unbiased":
        return fit_unbiased(dataset.labeled_pool(), spec)
    if config.estimator == "regcal":
        return regression_calibration(model, dataset.d_test, dataset.d_unlabel, spec)
    if config.estimator == "regcal_cf":
        return regression_calibration(
            None, None, dataset.d_unlabel, spec, crossfit=True, k=k,
            pool=dataset.labeled_pool(), learner_config=learner_config, rng=rng, plan=plan, n_jobs=n_jobs,
        )
    if config.subset_size >= model.n_learners:
        raise ConfigurationError(f"subset_size {config.subset_size} 必须小于 M={model.n_learners}")
    return subset_tree_ensembleiv(
        dataset, model, spec, config.subset_size, config.subset_draws, rng, selection, n_jobs,
    )
