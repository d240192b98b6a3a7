"""
EnsembleIV - 命令行入口

子命令:
    simulate    合成数据实验（主实验 DGP、外围特征曲线、敏感性分析）
    estimate    在用户 CSV 上训练集成并估计第二阶段回归
    diagnose    外围特征诊断（置换检验）
    benchmark   在同一份数据上比较多个估计量
    acceptance  运行验收套件

退出码: 0 成功，1 验收未通过，2 配置错误，3 估计失败，4 I/O 错误
"""
import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

from pydantic import ValidationError
from pydantic_settings import BaseSettings

from acceptance import AcceptanceRun, run_acceptance
from benchmarks import regression_calibration, run_benchmark
from dataset import ColumnSchema, ingest_csv, load_data_settings, make_partitioned, parse_schema
from diagnostics import load_diag_settings, run_diagnostic, run_diagnostic_kfold
from ensemble import (
    EnsembleModel, LearnerConfig, load_ensemble_settings, load_model, save_model, train_ensemble,
)
from ensemble_iv import default_selection, ensembleiv, ensembleiv_crossfit, load_iv_settings
from errors import ConfigurationError, DataInputError, EnsembleIVError, EstimationError, EstimationFailureError
from models import (
    BenchmarkConfig, CoefficientEstimate, PartitionedDataset, RngStream,
    SampleSet, SecondPhaseSpec,
)
from regression import bootstrap_estimates, load_regression_settings
from reporting import emit_model, emit_report, estimate_report
from simulation import (
    ExperimentSpec, MainDgpConfig, extension_curve, lambda_convergence, parse_estimator_key,
    power_curve, relevance_experiment, run_monte_carlo, sample_size_curve, sensitivity_sweep,
)
from tasks import configure_logging
from utils import parse_list, validate_fold_count, validate_probability, validate_selection_params

logger = logging.getLogger("ensembleiv")

EXPERIMENTS = ("main", "sweep", "power", "sample_size", "extension", "lambda", "relevance")
# 不需要 D_train 上训练好的模型
MODEL_FREE = ("unbiased", "regcal_cf", "ensembleiv_cf")
# configure_modules 写入 os.environ 的键，重新加载时先清除
_exported_keys: set = set()


# ==================== Configuration ====================
class Settings(BaseSettings):
    """命令行配置；--config 文件与 .env 同格式，命令行参数优先"""
    seed: int = 2024
    out_dir: str = "results"
    formats: str = "json,table"  # 逗号分隔
    threads: int = 1
    log_level: str = "INFO"

    # 集成学习器
    technique: str = "bagging"
    n_learners: int = 100

    # 分区 / 估计
    folds: int = 4
    family: str = "linear"
    lambda_mode: str = "standard"
    selection_method: str = "pca"
    selection_n: int = 3
    lasso_alpha: float = 0.05
    bootstrap: int = 0
    estimators: str = "biased,unbiased,regcal,regcal_cf,ensembleiv:pca,ensembleiv_cf:pca"
    subset_size: int = 50
    subset_draws: int = 100

    # 诊断
    permutations: int = 10000
    alpha: float = 0.05
    diagnostic_fraction: float = 0.2

    # 合成实验
    mlv_family: str = "continuous"
    reps: int = 50
    n_label: int = 1500
    n_unlabel: int = 7000
    sweep_parameter: str = "n_label"
    sweep_values: str = "500,1000,1500"
    sigmas: str = "0.02,0.1,0.2,0.3,0.4"
    n_totals: str = "1000,2000,5000"
    peripheral_reps: int = 100

    class Config:
        env_file = ".env"
        extra = "ignore"

    @property
    def formats_list(self) -> list:
        return parse_list(self.formats)

    @property
    def estimators_list(self) -> list:
        return parse_list(self.estimators)

    @property
    def sweep_values_list(self) -> list:
        return parse_list(self.sweep_values, float)

    @property
    def sigmas_list(self) -> list:
        return parse_list(self.sigmas, float)

    @property
    def n_totals_list(self) -> list:
        return parse_list(self.n_totals, int)


def configure_modules(env_file: Optional[str] = None, export: bool = True) -> list[BaseSettings]:
    """
    用同一份配置文件重建各模块的带前缀配置（ENSEMBLE_、IV_、REGRESSION_、DIAG_、DATA_）

    Args:
        env_file: 配置文件路径，缺省读取 .env
        export: 是否把解析结果写入环境变量，joblib 进程池中的 worker 重新导入模块时据此读到同样的值

    Returns:
        list[BaseSettings]: 重建后的各模块配置
    """
    for key in _exported_keys:
        os.environ.pop(key, None)
    _exported_keys.clear()

    modules = [
        load_ensemble_settings(env_file), load_iv_settings(env_file), load_regression_settings(env_file),
        load_diag_settings(env_file), load_data_settings(env_file),
    ]
    if not export:
        return modules
    for module_settings in modules:
        prefix = module_settings.model_config.get("env_prefix", "")
        for name, value in module_settings.model_dump(exclude_none=True).items():
            key = f"{prefix}{name}".upper()
            # 用户显式设置的环境变量保持不动
            if key in os.environ:
                continue
            os.environ[key] = str(value)
            _exported_keys.add(key)
    logger.debug(f"模块配置已加载: {env_file or '.env'}，导出 {len(_exported_keys)} 项")
    return modules


def load_settings(args: argparse.Namespace) -> Settings:
    """
    读取配置：.env 或 --config 文件，再由命令行参数覆盖
    各模块的带前缀配置从同一文件重建

    Raises:
        DataInputError: --config 文件不存在
    """
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "out_dir", "formats", "threads", "log_level", "bootstrap", "estimators")
        if getattr(args, key, None) is not None
    }
    if args.config is not None and not Path(args.config).is_file():
        raise DataInputError(f"配置文件不存在: {args.config}")
    configure_modules(args.config)
    if args.config is None:
        return Settings(**overrides)
    return Settings(_env_file=args.config, **overrides)


def _require(check: tuple[bool, str]) -> None:
    ok, message = check
    if not ok:
        raise ConfigurationError(message)


# ==================== 数据装配 ====================
def _load_pool(path: str, schema: ColumnSchema, binary_label: bool) -> SampleSet:
    pool = ingest_csv(path, schema, binary_label=binary_label)
    pool.require_labels(f"{path} (有标签文件)")
    return pool


def _second_phase_spec(settings: Settings, schema: ColumnSchema) -> SecondPhaseSpec:
    return SecondPhaseSpec(family=settings.family, control_names=schema.controls)


def _learner_config(settings: Settings, binary_label: bool) -> LearnerConfig:
    return LearnerConfig(
        technique=settings.technique,
        task="classification" if binary_label else "regression",
        n_learners=settings.n_learners,
    )


def _load_partitioned(args: argparse.Namespace, settings: Settings, rng: RngStream) -> tuple[PartitionedDataset, ColumnSchema]:
    schema = parse_schema(args.schema)
    pool = _load_pool(args.labeled, schema, args.binary_label)
    d_unlabel = ingest_csv(args.unlabeled, schema, binary_label=args.binary_label, id_offset=pool.n)
    _require(validate_fold_count(settings.folds, pool.n))
    return make_partitioned(pool, d_unlabel.without_labels(), settings.folds, rng), schema


def estimate_user(
    key: str,
    settings: Settings,
    data: PartitionedDataset,
    spec: SecondPhaseSpec,
    learner: LearnerConfig,
    rng: RngStream,
    model: Optional[EnsembleModel] = None,
) -> CoefficientEstimate:
    """
    在用户数据上计算一个估计量

    Args:
        key: 估计量键（biased / regcal_cf / ensembleiv:pca ...）
        settings: 配置
        data: 分区数据集
        spec: 第二阶段设定
        learner: 集成超参数
        rng: 随机数流；(0,) 训练 D_train 模型，(1,) 交叉拟合与树子集
        model: 已训练模型（缺省时在 D_train 上训练）

    Returns:
        CoefficientEstimate
    """
    base, method = parse_estimator_key(key)
    n_jobs = settings.threads
    if base not in MODEL_FREE and model is None:
        model = train_ensemble(data.d_train, learner, rng.child(0), n_jobs=n_jobs)

    selection = None
    if method is not None:
        _require(validate_selection_params(method, settings.selection_n, learner.n_learners))
        # LASSO 惩罚常数等未在命令行暴露的项取 IV_ 配置
        selection = default_selection().model_copy(
            update={"method": method, "n": settings.selection_n, "lasso_alpha": settings.lasso_alpha}
        )

    if base == "regcal_cf":
        return regression_calibration(
            None, None, data.d_unlabel, spec, crossfit=True, k=settings.folds,
            pool=data.labeled_pool(), learner_config=learner, rng=rng.child(1), n_jobs=n_jobs,
        )
    if base in ("biased", "unbiased", "regcal", "subset_trees"):
        config = BenchmarkConfig(
            estimator=base,
            subset_size=settings.subset_size if base == "subset_trees" else None,
            subset_draws=settings.subset_draws,
        )
        return run_benchmark(
            config, data, model, spec, rng.child(1), selection=selection,
            k=settings.folds, learner_config=learner, n_jobs=n_jobs,
        )
    if base == "ensembleiv":
        return ensembleiv(data, model, spec, selection, settings.lambda_mode, n_jobs=n_jobs)
    if base == "extended":
        return ensembleiv(data, model, spec, selection, "modified", n_jobs=n_jobs)
    return ensembleiv_crossfit(
        data.labeled_pool(), data.d_unlabel, settings.folds, spec, selection, learner,
        rng.child(1), lambda_mode=settings.lambda_mode, n_jobs=n_jobs,
    )


# ==================== 子命令 ====================
def cmd_estimate(args: argparse.Namespace, settings: Settings) -> int:
    started = time.perf_counter()
    rng = RngStream(master_seed=settings.seed)
    data, schema = _load_partitioned(args, settings, rng.child(0))
    spec = _second_phase_spec(settings, schema)
    learner = _learner_config(settings, args.binary_label)
    key = args.estimator or f"ensembleiv:{settings.selection_method}"

    model = None
    if args.model_cache and Path(args.model_cache).is_file():
        model = load_model(args.model_cache)
        logger.info(f"📦 已加载模型缓存 {args.model_cache}")
    elif parse_estimator_key(key)[0] not in MODEL_FREE:
        model = train_ensemble(data.d_train, learner, rng.child(2), n_jobs=settings.threads)
        if args.model_cache:
            save_model(model, args.model_cache)
            logger.info(f"📦 模型已缓存到 {args.model_cache}")

    def procedure(d: PartitionedDataset, stream: RngStream) -> CoefficientEstimate:
        # 原数据沿用已训练模型，bootstrap 副本重新训练
        return estimate_user(key, settings, d, spec, learner, stream, model if d is data else None)

    if settings.bootstrap:
        estimate = bootstrap_estimates(procedure, data, settings.bootstrap, rng.child(1), n_jobs=settings.threads)
    else:
        estimate = procedure(data, rng.child(1))

    report = estimate_report(
        "estimate", {key: estimate}, settings.seed,
        config={**settings.model_dump(), "estimator": key, "schema": schema.model_dump()},
        runtime_seconds=time.perf_counter() - started,
    )
    emit_report(report, settings.out_dir, settings.formats_list)
    return 0


def cmd_benchmark(args: argparse.Namespace, settings: Settings) -> int:
    started = time.perf_counter()
    rng = RngStream(master_seed=settings.seed)
    data, schema = _load_partitioned(args, settings, rng.child(0))
    spec = _second_phase_spec(settings, schema)
    learner = _learner_config(settings, args.binary_label)
    model = train_ensemble(data.d_train, learner, rng.child(1, 0), n_jobs=settings.threads)

    estimates: dict[str, CoefficientEstimate] = {}
    failures: dict[str, str] = {}
    for e, key in enumerate(settings.estimators_list):
        try:
            estimates[key] = estimate_user(key, settings, data, spec, learner, rng.child(2, e), model)
            logger.info(f"✅ {key}: mlv = {estimates[key].coef(spec.mlv_name):.4f}")
        except EstimationError as err:
            failures[key] = f"{type(err).__name__}: {err}"
            logger.warning(f"❌ {key} 失败: {err}")
    if not estimates:
        raise EstimationFailureError(f"所有估计量都失败: {failures}")

    report = estimate_report(
        "benchmark", estimates, settings.seed,
        config={**settings.model_dump(), "schema": schema.model_dump(), "failures": failures},
        runtime_seconds=time.perf_counter() - started,
    )
    emit_report(report, settings.out_dir, settings.formats_list)
    return 0


def cmd_diagnose(args: argparse.Namespace, settings: Settings) -> int:
    rng = RngStream(master_seed=settings.seed)
    schema = parse_schema(args.schema)
    pool = _load_pool(args.labeled, schema, args.binary_label)
    spec = _second_phase_spec(settings, schema)
    learner = _learner_config(settings, args.binary_label)
    _require(validate_probability("alpha", settings.alpha))

    if args.kfold:
        _require(validate_fold_count(args.kfold, pool.n))
        report = run_diagnostic_kfold(
            pool, spec, learner, args.kfold, rng, alpha=settings.alpha, permutations=settings.permutations,
            lambda_mode=settings.lambda_mode, n_jobs=settings.threads,
        )
        summary = {
            "combined_p_value": report.combined_p_value,
            "alpha": report.alpha,
            "rejected": report.rejected,
            "folds": [fold.summary() for fold in report.folds],
        }
        rows = [{"fold": f + 1, "p_value": fold.result.p_value, "ts": fold.result.ts_observed}
                for f, fold in enumerate(report.folds)]
        p_value, rejected = report.combined_p_value, report.rejected
    else:
        _require(validate_probability("diagnostic_fraction", settings.diagnostic_fraction))
        report = run_diagnostic(
            pool, spec, learner, rng, settings.diagnostic_fraction,
            permutations=settings.permutations, alpha=settings.alpha,
            lambda_mode=settings.lambda_mode, n_jobs=settings.threads,
        )
        summary = report.summary()
        rows = [pc.model_dump() for pc in report.result.pair_correlations]
        p_value, rejected = report.result.p_value, report.rejected

    emit_model("diagnostic", report, settings.out_dir, settings.formats_list, rows=rows, summary=summary)
    mark = "⚠️ 拒绝" if rejected else "✅ 未拒绝"
    logger.info(f"{mark} 外围特征原假设: p = {p_value:.4f}, α = {settings.alpha}")
    return 0


def _experiment_spec(settings: Settings, name: str) -> ExperimentSpec:
    dgp = MainDgpConfig(
        mlv_family=settings.mlv_family, second_phase=settings.family,
        n_label=settings.n_label, n_unlabel=settings.n_unlabel,
    )
    return ExperimentSpec(
        name=name,
        dgp=dgp,
        learner=LearnerConfig(technique=settings.technique, task=dgp.task, n_learners=settings.n_learners),
        estimators=settings.estimators_list,
        reps=settings.reps,
        folds=settings.folds,
        selection_n=settings.selection_n,
        lasso_alpha=settings.lasso_alpha,
        subset_size=settings.subset_size,
        subset_draws=settings.subset_draws,
    )


def cmd_simulate(args: argparse.Namespace, settings: Settings) -> int:
    rng = RngStream(master_seed=settings.seed)
    n_jobs = settings.threads
    name = args.name or f"simulate_{args.experiment}"
    experiment = args.experiment
    if experiment == "main":
        report = run_monte_carlo(_experiment_spec(settings, name), rng, n_jobs=n_jobs)
    elif experiment == "sweep":
        report = sensitivity_sweep(
            _experiment_spec(settings, name), settings.sweep_parameter, settings.sweep_values_list, rng, n_jobs,
        )
    elif experiment == "power":
        report = power_curve(
            settings.sigmas_list, rng, reps=settings.peripheral_reps,
            permutations=settings.permutations, alpha=settings.alpha, n_jobs=n_jobs,
        )
    elif experiment == "sample_size":
        report = sample_size_curve(
            settings.n_totals_list, rng, reps=settings.peripheral_reps,
            permutations=settings.permutations, alpha=settings.alpha, n_jobs=n_jobs,
        )
    elif experiment == "extension":
        report = extension_curve(settings.sigmas_list, rng, reps=settings.peripheral_reps, n_jobs=n_jobs)
    elif experiment == "lambda":
        spec = _experiment_spec(settings, name)
        report = lambda_convergence(
            rng, reps=settings.reps, dgp=spec.dgp, learner=spec.learner, n_jobs=n_jobs,
        )
    else:
        spec = _experiment_spec(settings, name)
        report = relevance_experiment(
            spec.dgp, spec.learner, spec.selection(settings.selection_method), rng,
            reps=settings.reps, k=settings.folds, n_jobs=n_jobs,
        )
    report = report.model_copy(update={"name": name})
    emit_report(report, settings.out_dir, settings.formats_list)
    return 0


def cmd_acceptance(args: argparse.Namespace, settings: Settings) -> int:
    criteria = parse_list(args.criteria, int) if args.criteria else None
    results = run_acceptance(RngStream(master_seed=settings.seed), criteria, args.quick, settings.threads)
    run = AcceptanceRun(seed=settings.seed, quick=args.quick, results=results)
    emit_model("acceptance", run, settings.out_dir, settings.formats_list, rows=run.rows())
    if run.all_passed:
        logger.info(f"✅ 验收通过: {len(results)} 项")
        return 0
    failed = [r.criterion for r in results if not r.passed]
    logger.error(f"❌ 验收未通过: {failed}")
    return 1


# ==================== Parser ====================
def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, help="主随机种子")
    parser.add_argument("--config", help="key=value 配置文件（与 .env 同格式）")
    parser.add_argument("--out", dest="out_dir", help="输出目录")
    parser.add_argument("--format", dest="formats", help="json,csv,table 的逗号组合")
    parser.add_argument("--threads", type=int, help="并行度，-1 表示全部核心")
    parser.add_argument("--log-level", dest="log_level", help="日志级别")


def _add_csv_inputs(parser: argparse.ArgumentParser, unlabeled: bool = True) -> None:
    parser.add_argument("--labeled", required=True, help="有标签 CSV（含 x 列）")
    if unlabeled:
        parser.add_argument("--unlabeled", required=True, help="无标签 CSV")
    parser.add_argument("--schema", required=True, help="列角色: y=<col>,x=<col>,w=<col,...>,v=<col,...>")
    parser.add_argument("--binary-label", dest="binary_label", action="store_true", help="X 为 0/1 标签")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensembleiv", description="EnsembleIV 估计与诊断")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="合成数据实验")
    _add_common(simulate)
    simulate.add_argument("--experiment", choices=EXPERIMENTS, default="main")
    simulate.add_argument("--estimators", help="估计量键，逗号分隔")
    simulate.add_argument("--name", help="报告名")
    simulate.set_defaults(handler=cmd_simulate)

    estimate = sub.add_parser("estimate", help="在 CSV 数据上估计")
    _add_common(estimate)
    _add_csv_inputs(estimate)
    estimate.add_argument("--estimator", help="估计量键，缺省 ensembleiv:<selection_method>")
    estimate.add_argument("--bootstrap", type=int, help="bootstrap 副本数（0 表示解析标准误）")
    estimate.add_argument("--model-cache", dest="model_cache", help="模型缓存文件，存在则读取，否则训练后写入")
    estimate.set_defaults(handler=cmd_estimate)

    diagnose = sub.add_parser("diagnose", help="外围特征诊断")
    _add_common(diagnose)
    _add_csv_inputs(diagnose, unlabeled=False)
    diagnose.add_argument("--kfold", type=int, help="D_diagnostic 在 K 折间轮换")
    diagnose.set_defaults(handler=cmd_diagnose)

    benchmark = sub.add_parser("benchmark", help="估计量比较")
    _add_common(benchmark)
    _add_csv_inputs(benchmark)
    benchmark.add_argument("--estimators", help="估计量键，逗号分隔")
    benchmark.set_defaults(handler=cmd_benchmark)

    acceptance = sub.add_parser(
        "acceptance", help="验收套件（全部通过退出 0，任一项未通过退出 1）",
        description="运行验收标准。全部通过时退出码为 0，任一项未通过时退出码为 1。",
    )
    _add_common(acceptance)
    acceptance.add_argument("--quick", action="store_true", help="缩小规模")
    acceptance.add_argument("--criteria", help="只运行指定编号，逗号分隔")
    acceptance.set_defaults(handler=cmd_acceptance)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    命令行主函数

    Returns:
        int: 退出码
    """
    args = build_parser().parse_args(argv)
    handler: Callable[[argparse.Namespace, Settings], int] = args.handler
    try:
        settings = load_settings(args)
        configure_logging(settings.log_level)
        return handler(args, settings)
    except EnsembleIVError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"❌ 配置校验失败: {e}")
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
