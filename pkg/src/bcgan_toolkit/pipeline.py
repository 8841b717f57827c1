# src/bcgan_toolkit/pipeline.py

"""
各子命令的实际流程。每个 cmd_* 都会在输出目录写出 resolved_config.<cmd>.yaml，
并在自己的子目录中写出 manifest.json (列出所有产物及其格式标签)。
"""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import config
from . import classifiers as clf
from . import compat_eval
from . import data_io
from . import gan
from .data_io import Dataset
from .errors import ConfigError, DataIngestError, ProjectionUnreliableError
from .experiment import ExperimentConfig, dump_config, validate

logger = logging.getLogger(__name__)

PRETRAIN_MANIFEST = "manifest.json"
GAN_CHECKPOINT = "gan.npz"
LOSS_HISTORY = "loss_history.csv"
SYNTHETIC_CSV = "synthetic.csv"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
IMPORTANCE_CSV = "importances_{source}.csv"
SUMMARY_CSV = "summary.csv"


# ======================================================================
# --- 公共工具 ---
# ======================================================================

def _rel(path: Path, root: Path) -> str:
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


def write_manifest(directory: Path, root: Path, command: str, seed: int,
                   files: Sequence[Tuple[Path, str]], **extra) -> Path:
    """清单不含时间戳，同一配置重复运行得到逐字节相同的文件。"""
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": config.FORMAT_MANIFEST,
        "command": command,
        "seed": seed,
        "files": [{"path": _rel(p, root), "format": fmt} for p, fmt in files],
        **extra,
    }
    path = directory / PRETRAIN_MANIFEST
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=False)
    return path


def _snapshot(cfg: ExperimentConfig, command: str) -> Path:
    path = dump_config(cfg, cfg.out_path / f"resolved_config.{command}.yaml")
    logger.info(f"  已写出配置快照: {path.name}")
    return path


def _derived_seeds(seed: int, n: int) -> List[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def load_datasets(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """
    返回 (训练集, 测试集)。
    - toy2d: 训练集与测试集由同一 seed 派生的两个独立种子生成
    - csv:   测试集用训练集的统计量转换；未提供 test_path 时按 seed 随机二分训练文件
    """
    ds = cfg.dataset
    if ds.source == "toy2d":
        train_seed, test_seed = _derived_seeds(cfg.seed, 2)
        train = data_io.toy2d_generate(ds.kind, ds.n_train, ds.noise, train_seed, ds.n_classes)
        test = data_io.toy2d_generate(ds.kind, ds.n_test, ds.noise, test_seed, ds.n_classes)
        return train, test
    spec = data_io.IngestSpec(ds.label, list(ds.discrete), list(ds.continuous))
    if ds.test_path:
        train = data_io.csv_ingest(ds.train_path, spec)
        return train, data_io.apply_schema(ds.test_path, train.schema)
    logger.warning("⚠️ 未提供 test_path，按 seed 将训练文件随机二分为训练集与测试集。")
    return data_io.csv_ingest_split(ds.train_path, spec, cfg.seed)


# ======================================================================
# --- pretrain ---
# ======================================================================

def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    """训练 k 个半数据 MLP 分类器，写出检查点与清单 (种子、划分哈希、验证准确率)。"""
    cfg = validate(cfg)
    logger.info("=" * 25 + " 预训练分类器 " + "=" * 25)
    _snapshot(cfg, "pretrain")
    train, _ = load_datasets(cfg)
    pc = cfg.pretrain
    models = clf.make_pretrained_set(train, pc.k, cfg.seed, pc.hidden, pc.epochs,
                                     pc.learning_rate, pc.batch_size, workers=config.NUM_WORKERS)

    out_dir = cfg.out_path / config.PRETRAIN_SUBDIR
    majority = float(data_io.class_prior(train).probabilities.max())
    files: List[Tuple[Path, str]] = []
    members = []
    for model in models:
        i = model.meta["member"]
        _, held_out = data_io.split_half_indices(len(train), model.meta["split_seed"])
        val_acc = clf.accuracy(model, train.subset(held_out))
        if val_acc <= majority + config.DEGENERATE_ACCURACY_MARGIN:
            logger.warning(
                f"⚠️ 分类器 {i} 的验证准确率 {val_acc:.4f} 不高于多数类比例 {majority:.4f} + "
                f"{config.DEGENERATE_ACCURACY_MARGIN}，训练可能退化。"
            )
        path = clf.save_classifier(model, out_dir / f"classifier_{i}.npz")
        files.append((path, config.FORMAT_CLASSIFIER))
        members.append({
            "member": i,
            "path": _rel(path, cfg.out_path),
            "split_seed": model.meta["split_seed"],
            "train_seed": model.meta["train_seed"],
            "split_hash": model.meta["split_hash"],
            "train_size": model.meta["train_size"],
            "validation_accuracy": val_acc,
        })
        logger.info(f"  ✅ 分类器 {i}: 划分 {model.meta['split_hash']}，验证准确率 {val_acc:.4f}")

    manifest = write_manifest(out_dir, cfg.out_path, "pretrain", cfg.seed, files, classifiers=members)
    logger.info(f"预训练完成，清单: {_rel(manifest, cfg.out_path)}")
    return manifest


def load_pretrained(manifest_path: Path) -> List[clf.ClassifierModel]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ConfigError(f"预训练分类器清单不存在: {manifest_path}", path=str(manifest_path))
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != config.FORMAT_MANIFEST or manifest.get("command") != "pretrain":
        raise ConfigError(f"不是预训练分类器清单: {manifest_path}")
    root = manifest_path.parent.parent
    return [clf.load_classifier(root / m["path"]) for m in manifest["classifiers"]]


# ======================================================================
# --- train-gan ---
# ======================================================================

def cmd_train_gan(cfg: ExperimentConfig, classifier_manifest: Optional[Path] = None,
                  progress: bool = True) -> Path:
    """训练 GAN，写出检查点与逐步损失 CSV。λ_bc > 0 时必须已有预训练清单。"""
    cfg = validate(cfg)
    logger.info("=" * 25 + f" 训练 GAN ({cfg.gan.variant}, λ_bc={cfg.gan.lambda_bc:g}) " + "=" * 25)
    _snapshot(cfg, "train-gan")
    classifiers: List[clf.ClassifierModel] = []
    if cfg.gan.lambda_bc > 0:
        manifest = Path(classifier_manifest or cfg.out_path / config.PRETRAIN_SUBDIR / PRETRAIN_MANIFEST)
        if not manifest.exists():
            raise ConfigError(
                f"lambda_bc > 0 需要预训练分类器，但清单不存在: {manifest}。请先运行 pretrain。",
                path=str(manifest),
            )
        classifiers = load_pretrained(manifest)
        logger.info(f"  已加载 {len(classifiers)} 个预训练分类器。")

    train, _ = load_datasets(cfg)
    bundle = gan.init_bundle(cfg.gan, train.schema, data_io.class_prior(train))
    bundle, history = gan.train(bundle, train, classifiers, progress=progress)

    out_dir = cfg.out_path / config.GAN_SUBDIR
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = gan.save_bundle(bundle, out_dir / GAN_CHECKPOINT)
    loss_csv = out_dir / LOSS_HISTORY
    history.to_csv(loss_csv, index=False)
    write_manifest(out_dir, cfg.out_path, "train-gan", cfg.seed,
                   [(ckpt, config.FORMAT_GAN), (loss_csv, config.FORMAT_LOSS_HISTORY)],
                   steps=int(len(history)), variant=cfg.gan.variant, lambda_bc=cfg.gan.lambda_bc)
    logger.info(f"  ✅ 检查点: {_rel(ckpt, cfg.out_path)}，损失记录: {_rel(loss_csv, cfg.out_path)}")
    return ckpt


# ======================================================================
# --- generate ---
# ======================================================================

def cmd_generate(cfg: ExperimentConfig, checkpoint: Optional[Path] = None, n: Optional[int] = None,
                 seed: Optional[int] = None) -> Path:
    """从 GAN 检查点采样 n 行，导出 CSV + schema 旁车文件。"""
    cfg = validate(cfg)
    logger.info("=" * 25 + " 生成合成数据 " + "=" * 25)
    _snapshot(cfg, "generate")
    if n is None:
        n = cfg.evaluation.n_generated
    if n is None:
        n = len(load_datasets(cfg)[0])
    if n <= 0:
        raise ConfigError(f"生成样本数 n 必须 > 0，得到 {n}")
    checkpoint = Path(checkpoint or cfg.out_path / config.GAN_SUBDIR / GAN_CHECKPOINT)
    if not checkpoint.exists():
        raise ConfigError(f"GAN 检查点不存在: {checkpoint}。请先运行 train-gan。", path=str(checkpoint))
    bundle = gan.load_bundle(checkpoint)
    synthetic = gan.sample_conditional(bundle, n, seed=cfg.seed if seed is None else seed)

    out_dir = cfg.out_path / config.SYNTHETIC_SUBDIR
    csv_path, side = data_io.export_dataset(synthetic, out_dir / SYNTHETIC_CSV,
                                            harden=cfg.evaluation.harden_one_hot)
    write_manifest(out_dir, cfg.out_path, "generate", cfg.seed,
                   [(csv_path, config.FORMAT_DATASET_CSV), (side, config.FORMAT_SCHEMA)], rows=n)
    logger.info(f"  ✅ 已生成 {n} 行: {_rel(csv_path, cfg.out_path)}")
    return csv_path


# ======================================================================
# --- evaluate ---
# ======================================================================

def cmd_evaluate(cfg: ExperimentConfig, synthetic: Optional[Path] = None,
                 real: Optional[Path] = None, test: Optional[Path] = None,
                 roster: Optional[Sequence[str]] = None) -> compat_eval.CompatReport:
    """
    在真实 / 合成数据上训练下游算法并在测试集上比较。
    real / test 可以是 export_dataset 导出的文件，否则按数据集配置加载。
    """
    cfg = validate(cfg)
    logger.info("=" * 25 + " 模型兼容性评估 " + "=" * 25)
    _snapshot(cfg, "evaluate")
    real_data, test_data = load_datasets(cfg) if real is None or test is None else (None, None)
    if real is not None:
        real_data = data_io.load_exported(real)
    if test is not None:
        test_data = data_io.load_exported(test)
    synthetic = Path(synthetic or cfg.out_path / config.SYNTHETIC_SUBDIR / SYNTHETIC_CSV)
    gen_data = data_io.load_exported(synthetic)
    real_data.schema.check_compatible(gen_data.schema, "真实数据与合成数据")

    algorithms = clf.roster(roster or cfg.evaluation.roster)
    report = compat_eval.relative_accuracy(
        real_data, gen_data, test_data, algorithms, seed=cfg.seed, workers=config.NUM_WORKERS,
        metadata={"dataset": cfg.name, "variant": cfg.gan.variant,
                  "lambda_bc": cfg.gan.lambda_bc, "seed": cfg.seed},
    )
    out_dir = cfg.out_path / config.REPORT_SUBDIR
    files: List[Tuple[Path, str]] = []
    ev = cfg.evaluation
    if ev.interpretability:
        report.interpretability = compat_eval.interpretability_report(
            real_data, gen_data, cfg.seed, ev.precision_ks, ev.l1_cs)
        names = real_data.schema.feature_names()
        for source, data in (("real", real_data), ("generated", gen_data)):
            forest = clf.train_random_forest(data, 10, 10, cfg.seed)
            path = clf.export_importances(forest, names, out_dir / IMPORTANCE_CSV.format(source=source))
            files.append((path, config.FORMAT_IMPORTANCE_CSV))
    if ev.projection:
        try:
            proj = compat_eval.projection_mislabel(real_data, gen_data, cfg.seed, test_data)
            report.metadata["projection_mislabel_rate"] = proj.mislabel_rate
        except ProjectionUnreliableError as e:
            logger.warning(f"⚠️ {e}")
            report.metadata["projection_mislabel_rate"] = "projection unreliable"

    json_path = report.save_json(out_dir / REPORT_JSON)
    csv_path = report.save_csv(out_dir / REPORT_CSV)
    files = [(json_path, config.FORMAT_REPORT), (csv_path, config.FORMAT_REPORT_CSV), *files]
    write_manifest(out_dir, cfg.out_path, "evaluate", cfg.seed, files)
    avg = compat_eval.format_percent(report.average)
    logger.info(f"  ✅ 平均相对准确率: {avg}%  报告: {_rel(json_path, cfg.out_path)}")
    return report


# ======================================================================
# --- toy-demo ---
# ======================================================================

def _toy_gan_config(cfg: ExperimentConfig, method: str) -> gan.GanConfig:
    if method == "acgan":
        return replace(cfg.gan, variant="acgan", lambda_bc=0.0)
    if method == "wgan":
        return replace(cfg.gan, variant="wgan_gp", lambda_bc=0.0)
    return replace(cfg.gan, variant="wgan_gp", lambda_bc=cfg.toy_demo.lambda_bc)


def _points_frame(data: Dataset) -> pd.DataFrame:
    return pd.DataFrame({"x1": data.features[:, 0], "x2": data.features[:, 1], "label": data.labels})


def cmd_toy_demo(cfg: ExperimentConfig, progress: bool = True) -> Path:
    """
    对 real / acgan / wgan / bwgan 四种来源：写出样本点 CSV、随机森林决策栅格 CSV，
    并汇总随机森林在真实测试集上的准确率 (以及投影分类器误标率)。
    """
    cfg = validate(cfg)
    logger.info("=" * 25 + " 二维玩具实验 " + "=" * 25)
    _snapshot(cfg, "toy-demo")
    train, test = load_datasets(cfg)
    if train.n_features != 2:
        raise DataIngestError(f"toy-demo 只支持二维数据，当前特征维度为 {train.n_features}")
    td = cfg.toy_demo
    out_dir = cfg.out_path / config.PLOT_DATA_SUBDIR
    out_dir.mkdir(parents=True, exist_ok=True)

    classifiers: List[clf.ClassifierModel] = []
    if "bwgan" in td.methods and td.lambda_bc > 0:
        pc = cfg.pretrain
        classifiers = clf.make_pretrained_set(train, pc.k, cfg.seed, pc.hidden, pc.epochs,
                                              pc.learning_rate, pc.batch_size, workers=config.NUM_WORKERS)

    try:
        projection, proj_acc = compat_eval.train_projection_classifier(train, cfg.seed, test)
        logger.info(f"  投影分类器测试准确率 {proj_acc:.4f}")
    except ProjectionUnreliableError as e:
        logger.warning(f"⚠️ {e}")
        projection = None

    files: List[Tuple[Path, str]] = []
    summary: List[Dict[str, object]] = []
    prior = data_io.class_prior(train)
    for method in td.methods:
        logger.info(f"--- 方法 '{method}' ---")
        if method == "real":
            points = train
        else:
            bundle = gan.init_bundle(_toy_gan_config(cfg, method), train.schema, prior)
            bundle, _ = gan.train(bundle, train, classifiers, progress=progress)
            points = gan.sample_conditional(bundle, len(train), seed=cfg.seed)

        rf = clf.train_random_forest(points, td.rf_n_trees, td.rf_max_depth, cfg.seed)
        acc = clf.accuracy(rf, test)
        if projection is not None:
            _, mislabel, _ = compat_eval.project_samples(projection, points, train)
        else:
            mislabel = "projection unreliable"

        points_path = out_dir / f"points_{method}.csv"
        _points_frame(points).to_csv(points_path, index=False)
        grid_path = compat_eval.save_grid_csv(
            compat_eval.decision_grid(rf, td.grid_resolution), out_dir / f"grid_{method}.csv")
        files += [(points_path, config.FORMAT_POINTS_CSV), (grid_path, config.FORMAT_GRID_CSV)]
        summary.append({"method": method, "rf_test_accuracy": acc, "mislabel_rate": mislabel,
                        "n_points": len(points)})
        logger.info(f"  ✅ {method}: 随机森林测试准确率 {acc:.4f}")

    summary_path = out_dir / SUMMARY_CSV
    pd.DataFrame(summary, columns=["method", "rf_test_accuracy", "mislabel_rate", "n_points"]) \
        .to_csv(summary_path, index=False)
    files.append((summary_path, config.FORMAT_SUMMARY_CSV))
    write_manifest(out_dir, cfg.out_path, "toy-demo", cfg.seed, files,
                   grid_resolution=td.grid_resolution)
    return summary_path
