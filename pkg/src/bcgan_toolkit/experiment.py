# src/bcgan_toolkit/experiment.py

"""
实验配置：YAML 文件 → dataclass 树，合并默认值、校验，并能把所有默认值展开后写回。
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, List, Literal, Mapping, Optional

import yaml

from . import config
from .errors import ConfigError
from .gan import GanConfig

logger = logging.getLogger(__name__)


@dataclass
class DatasetConfig:
    source: Literal["toy2d", "csv"] = "toy2d"
    # toy2d
    kind: str = "two_gaussians"
    n_train: int = 1000
    n_test: int = 1000
    noise: float = config.TOY_DEFAULT_NOISE
    n_classes: int = 2
    # csv
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    label: Optional[str] = None
    discrete: List[str] = field(default_factory=list)
    continuous: List[str] = field(default_factory=list)


@dataclass
class PretrainConfig:
    k: int = config.DEFAULT_PRETRAIN_K
    hidden: List[int] = field(default_factory=lambda: list(config.DEFAULT_PRETRAIN_HIDDEN))
    epochs: int = config.DEFAULT_PRETRAIN_EPOCHS
    learning_rate: float = config.DEFAULT_CLASSIFIER_LR
    batch_size: int = config.DEFAULT_CLASSIFIER_BATCH


@dataclass
class EvaluationConfig:
    roster: List[str] = field(default_factory=lambda: list(config.DEFAULT_ROSTER))
    # 生成数据集的大小，为空时等于真实训练集大小
    n_generated: Optional[int] = None
    harden_one_hot: bool = True
    interpretability: bool = True
    precision_ks: List[int] = field(default_factory=lambda: list(config.PRECISION_KS))
    l1_cs: List[float] = field(default_factory=lambda: list(config.L1_CS))
    projection: bool = False


@dataclass
class ToyDemoConfig:
    methods: List[str] = field(default_factory=lambda: list(config.TOY_METHODS))
    grid_resolution: int = config.GRID_RESOLUTION
    rf_n_trees: int = 10
    rf_max_depth: int = 10
    # bwgan 使用的 BC-loss 权重
    lambda_bc: float = config.DEFAULT_LAMBDA_BC


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: Optional[int] = None
    output_dir: str = str(config.OUTPUTS_DIR)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    gan: GanConfig = field(default_factory=lambda: GanConfig(lambda_bc=config.DEFAULT_LAMBDA_BC))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    toy_demo: ToyDemoConfig = field(default_factory=ToyDemoConfig)

    @property
    def out_path(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"format": config.FORMAT_CONFIG, **d}


_SECTIONS = {
    "dataset": DatasetConfig,
    "pretrain": PretrainConfig,
    "evaluation": EvaluationConfig,
    "toy_demo": ToyDemoConfig,
}


def _build_section(cls, raw: Any, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"配置节 '{section}' 必须是映射", section=section)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"配置节 '{section}' 中有未知字段: {unknown}", section=section, unknown=unknown)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"配置节 '{section}' 无效: {e}", section=section) from e


def from_dict(raw: Mapping) -> ExperimentConfig:
    """把 (可能不完整的) 映射合并到默认值上。"""
    raw = dict(raw or {})
    fmt = raw.pop("format", config.FORMAT_CONFIG)
    if fmt != config.FORMAT_CONFIG:
        raise ConfigError(f"配置格式标签不匹配: 期望 '{config.FORMAT_CONFIG}'，实际 '{fmt}'")
    top_known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top_known)
    if unknown:
        raise ConfigError(f"配置中有未知字段: {unknown}", unknown=unknown)

    kwargs: dict = {k: raw[k] for k in ("name", "seed", "output_dir") if k in raw}
    for section, cls in _SECTIONS.items():
        kwargs[section] = _build_section(cls, raw.get(section), section)
    gan_raw = dict(raw.get("gan") or {})
    gan_raw.setdefault("lambda_bc", config.DEFAULT_LAMBDA_BC)
    kwargs["gan"] = _build_section(GanConfig, gan_raw, "gan")
    cfg = ExperimentConfig(**kwargs)
    if cfg.seed is not None:
        cfg.gan.seed = int(cfg.seed)
    return cfg


def load_config(path: Optional[str | Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件未找到: {path}", path=str(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"无法解析配置文件 {path}: {e}", path=str(path)) from e
    return from_dict(raw)


def apply_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None,
                    variant: Optional[str] = None, lambda_bc: Optional[float] = None) -> ExperimentConfig:
    """命令行参数覆盖配置文件。"""
    gan_changes: dict = {}
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
        gan_changes["seed"] = int(seed)
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    if variant is not None:
        gan_changes["variant"] = variant
    if lambda_bc is not None:
        gan_changes["lambda_bc"] = float(lambda_bc)
    if gan_changes:
        try:
            cfg = replace(cfg, gan=replace(cfg.gan, **gan_changes))
        except ValueError as e:
            raise ConfigError(f"命令行参数无效: {e}") from e
    return cfg


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.seed is None:
        raise ConfigError("配置中缺少 seed (可在配置文件中设置，或使用 --seed)")
    ds = cfg.dataset
    if ds.source not in ("toy2d", "csv"):
        raise ConfigError(f"未知的数据来源: '{ds.source}'")
    if ds.source == "csv":
        if not ds.train_path or not ds.label:
            raise ConfigError("csv 数据来源需要 dataset.train_path 与 dataset.label")
        for p in (ds.train_path, ds.test_path):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"数据文件不存在: {p}", path=p)
    elif ds.n_train < 2 or ds.n_test < 1:
        raise ConfigError(f"n_train 必须 ≥ 2、n_test 必须 ≥ 1，得到 {ds.n_train}, {ds.n_test}")
    if cfg.pretrain.k < 1 or cfg.pretrain.epochs < 0:
        raise ConfigError("pretrain.k 必须 ≥ 1，pretrain.epochs 必须 ≥ 0")
    if cfg.evaluation.n_generated is not None and cfg.evaluation.n_generated < 1:
        raise ConfigError(f"evaluation.n_generated 必须 ≥ 1，得到 {cfg.evaluation.n_generated}")
    unknown = [m for m in cfg.toy_demo.methods if m not in config.TOY_METHODS]
    if unknown:
        raise ConfigError(f"toy_demo.methods 中有未知方法: {unknown}")
    cfg.gan.seed = int(cfg.seed)
    return cfg


def dump_config(cfg: ExperimentConfig, path: Path) -> Path:
    """写出所有默认值都已展开的配置快照，可直接作为 --config 重新运行。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False, allow_unicode=True)
    return path
