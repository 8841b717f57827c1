# src/bcgan_toolkit/data_io.py

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from . import config
from .errors import DataIngestError, SchemaMismatchError

logger = logging.getLogger(__name__)

ToyKind = Literal["two_gaussians", "two_moons", "gaussian_mixture"]
TOY_KINDS: Tuple[str, ...] = ("two_gaussians", "two_moons", "gaussian_mixture")

# gaussian_mixture 的类中心均匀分布在以 (0.5, 0.5) 为圆心的圆上
MIXTURE_RADIUS: float = 0.25
# 常数连续列缩放后的取值
CONSTANT_COLUMN_VALUE: float = 0.5


# ======================================================================
# --- 特征模式 (schema) ---
# ======================================================================

@dataclass
class ColumnSpec:
    """一个原始列：连续列记录 min/max，离散列记录类别 (决定 one-hot 的顺序)。"""
    name: str
    kind: Literal["continuous", "discrete"]
    min: Optional[float] = None
    max: Optional[float] = None
    categories: List[str] = field(default_factory=list)

    @property
    def width(self) -> int:
        return 1 if self.kind == "continuous" else len(self.categories)

    def feature_names(self) -> List[str]:
        if self.kind == "continuous":
            return [self.name]
        return [f"{self.name}={c}" for c in self.categories]

    def to_dict(self) -> dict:
        if self.kind == "continuous":
            return {"name": self.name, "type": "continuous", "min": self.min, "max": self.max}
        return {"name": self.name, "type": "discrete", "categories": list(self.categories)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSpec":
        if d["type"] == "continuous":
            return cls(d["name"], "continuous", float(d["min"]), float(d["max"]))
        if d["type"] == "discrete":
            return cls(d["name"], "discrete", categories=[str(c) for c in d["categories"]])
        raise DataIngestError(f"未知的列类型: '{d['type']}'", column=d.get("name"))


@dataclass
class FeatureSchema:
    columns: List[ColumnSpec]
    label_name: str = "label"
    class_names: List[str] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return sum(c.width for c in self.columns)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def feature_names(self) -> List[str]:
        return [name for c in self.columns for name in c.feature_names()]

    def groups(self) -> List[Tuple[ColumnSpec, slice]]:
        """每个原始列在处理后特征矩阵中所占的列区间。"""
        out, start = [], 0
        for col in self.columns:
            out.append((col, slice(start, start + col.width)))
            start += col.width
        return out

    def one_hot_groups(self) -> List[slice]:
        return [s for c, s in self.groups() if c.kind == "discrete"]

    def to_dict(self) -> dict:
        return {
            "format": config.FORMAT_SCHEMA,
            "label": {"name": self.label_name, "classes": list(self.class_names)},
            "columns": [c.to_dict() for c in self.columns],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        if d.get("format") != config.FORMAT_SCHEMA:
            raise DataIngestError(f"schema 格式标签不匹配: 期望 '{config.FORMAT_SCHEMA}'，实际 '{d.get('format')}'")
        return cls(
            columns=[ColumnSpec.from_dict(c) for c in d["columns"]],
            label_name=str(d["label"]["name"]),
            class_names=[str(c) for c in d["label"]["classes"]],
        )

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False, allow_unicode=True)
        return path

    @classmethod
    def load(cls, path: Path) -> "FeatureSchema":
        path = Path(path)
        if not path.exists():
            raise DataIngestError(f"schema 文件未找到: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(yaml.safe_load(f))

    def check_compatible(self, other: "FeatureSchema", what: str = "数据集") -> None:
        """两份数据必须在同一个特征空间中。"""
        if self.feature_names() != other.feature_names() or self.class_names != other.class_names:
            raise SchemaMismatchError(
                f"{what}的特征模式不一致",
                expected=self.feature_names(), actual=other.feature_names(),
                expected_classes=self.class_names, actual_classes=other.class_names,
            )


# ======================================================================
# --- 数据集与类别先验 ---
# ======================================================================

@dataclass
class Dataset:
    """features: n × d (预处理后位于 [0,1])；labels: n 个整数类别。"""
    features: np.ndarray
    labels: np.ndarray
    schema: FeatureSchema

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise DataIngestError(f"特征矩阵必须是二维的，得到形状 {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataIngestError(
                f"特征行数 ({self.features.shape[0]}) 与标签数 ({self.labels.shape[0]}) 不一致"
            )
        if self.features.shape[1] != self.schema.n_features:
            raise SchemaMismatchError(
                f"特征列数 ({self.features.shape[1]}) 与 schema 宽度 ({self.schema.n_features}) 不一致"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataIngestError(f"标签超出范围 [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.schema.n_classes

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.schema)


@dataclass
class ClassPrior:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64).reshape(-1)
        if p.size == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"类别先验必须非负且和为 1，得到 {p.tolist()}")
        self.probabilities = p

    @property
    def n_classes(self) -> int:
        return self.probabilities.size


def class_prior(data: Dataset) -> ClassPrior:
    """按类别计数得到经验先验 P(y)。"""
    if len(data) == 0:
        raise ValueError("不能对空数据集估计类别先验")
    counts = np.bincount(data.labels, minlength=data.n_classes).astype(np.float64)
    return ClassPrior(counts / counts.sum())


# ======================================================================
# --- 二维玩具数据 ---
# ======================================================================

def _toy_schema(n_classes: int) -> FeatureSchema:
    return FeatureSchema(
        columns=[ColumnSpec("x1", "continuous", 0.0, 1.0), ColumnSpec("x2", "continuous", 0.0, 1.0)],
        label_name="label",
        class_names=[str(k) for k in range(n_classes)],
    )


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    return np.repeat(np.arange(n_classes), counts)


def toy2d_generate(kind: ToyKind, n: int, noise: float = config.TOY_DEFAULT_NOISE,
                   seed: int = 0, n_classes: int = 2) -> Dataset:
    """
    生成类别均衡的二维玩具数据，坐标裁剪到 [0,1]。

    - two_gaussians: 两个各向同性高斯，中心 (0.35, 0.5) 与 (0.65, 0.5)，标准差 = noise
    - two_moons: 经典双月形，仿射缩放到 [0,1]² 内
    - gaussian_mixture: n_classes 个高斯，中心均匀分布在半径 0.25 的圆上
    """
    if kind not in TOY_KINDS:
        raise ValueError(f"未知的玩具数据类型: '{kind}'。可用: {TOY_KINDS}")
    if n < 2:
        raise ValueError(f"样本数 n 必须 ≥ 2，得到 {n}")
    if noise < 0:
        raise ValueError(f"noise 必须 ≥ 0，得到 {noise}")
    if kind != "gaussian_mixture":
        n_classes = 2
    elif n_classes < 2:
        raise ValueError(f"gaussian_mixture 至少需要 2 个类别，得到 {n_classes}")

    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, n_classes)

    if kind == "two_gaussians":
        means = np.asarray(config.TOY_CLASS_MEANS["two_gaussians"])
        points = means[labels] + noise * rng.standard_normal((n, 2))
    elif kind == "gaussian_mixture":
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        means = 0.5 + MIXTURE_RADIUS * np.column_stack([np.cos(angles), np.sin(angles)])
        points = means[labels] + noise * rng.standard_normal((n, 2))
    else:
        t = rng.uniform(0.0, np.pi, size=n)
        upper = np.column_stack([np.cos(t), np.sin(t)])
        lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
        raw = np.where(labels[:, None] == 0, upper, lower)
        # 原始范围 x ∈ [-1, 2]、y ∈ [-0.5, 1]，缩放到 [0.1, 0.9]²
        scaled = np.column_stack([(raw[:, 0] + 1.0) / 3.0, (raw[:, 1] + 0.5) / 1.5])
        points = 0.1 + 0.8 * scaled + noise * rng.standard_normal((n, 2))

    order = rng.permutation(n)
    features = np.clip(points[order], 0.0, 1.0)
    logger.debug(f"生成玩具数据 kind={kind}, n={n}, noise={noise}, seed={seed}")
    return Dataset(features, labels[order], _toy_schema(n_classes))


# ======================================================================
# --- CSV 读取与预处理 ---
# ======================================================================

@dataclass
class IngestSpec:
    """描述原始 CSV 的哪些列是标签、离散列和连续列。continuous 为空时取剩余所有列。"""
    label: str
    discrete: List[str] = field(default_factory=list)
    continuous: List[str] = field(default_factory=list)


def _read_csv(frame_or_path: pd.DataFrame | str | Path) -> pd.DataFrame:
    if isinstance(frame_or_path, pd.DataFrame):
        return frame_or_path
    path = Path(frame_or_path)
    if not path.exists():
        raise DataIngestError(f"CSV 文件未找到: {path}")
    try:
        return pd.read_csv(path, encoding="utf-8", skipinitialspace=True)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataIngestError(f"无法解析 CSV 文件 {path}: {e}") from e


def _numeric_column(frame: pd.DataFrame, name: str) -> np.ndarray:
    values = pd.to_numeric(frame[name], errors="coerce")
    if values.isna().any():
        first = frame[name][values.isna()].iloc[0]
        raise DataIngestError(f"连续列 '{name}' 含有无法解析的数值: {first!r}", column=name)
    return values.to_numpy(dtype=np.float64)


def _label_text(series: pd.Series) -> pd.Series:
    """标签统一转成文本；整数值的浮点标签 (1.0) 写作 '1'。"""
    if pd.api.types.is_float_dtype(series):
        return series.map(lambda v: str(int(v)) if float(v).is_integer() else str(v))
    return series.astype(str)


def _sorted_classes(series: pd.Series) -> List[str]:
    series = series.dropna()
    if pd.api.types.is_numeric_dtype(series):
        return list(_label_text(pd.Series(np.sort(series.unique()))))
    return sorted(str(v) for v in series.unique())


def _check_columns(frame: pd.DataFrame, names: Sequence[str]) -> None:
    missing = [c for c in names if c not in frame.columns]
    if missing:
        raise DataIngestError(f"CSV 中缺少列: {missing}", missing=missing)


def fit_schema(frame: pd.DataFrame, spec: IngestSpec) -> FeatureSchema:
    """用训练集统计量 (min/max、类别出现顺序) 构建 schema。"""
    _check_columns(frame, [spec.label, *spec.discrete, *spec.continuous])
    continuous = spec.continuous or [
        c for c in frame.columns if c != spec.label and c not in spec.discrete
    ]
    columns: List[ColumnSpec] = []
    for name in frame.columns:
        if name in spec.discrete:
            categories = [str(v) for v in pd.unique(frame[name].astype(str))]
            columns.append(ColumnSpec(name, "discrete", categories=categories))
        elif name in continuous:
            values = _numeric_column(frame, name)
            columns.append(ColumnSpec(name, "continuous", float(values.min()), float(values.max())))
    if frame[spec.label].isna().any():
        raise DataIngestError(f"标签列 '{spec.label}' 中存在缺失值", column=spec.label)
    return FeatureSchema(columns, spec.label, _sorted_classes(frame[spec.label]))


def _encode_labels(frame: pd.DataFrame, schema: FeatureSchema) -> np.ndarray:
    if schema.label_name not in frame.columns:
        raise DataIngestError(f"缺少标签列 '{schema.label_name}'", column=schema.label_name)
    raw = frame[schema.label_name]
    if raw.isna().any():
        raise DataIngestError(f"标签列 '{schema.label_name}' 中存在缺失值", column=schema.label_name)
    as_text = _label_text(raw)
    index = {name: i for i, name in enumerate(schema.class_names)}
    unknown = sorted(set(as_text) - set(index))
    if unknown:
        raise DataIngestError(f"出现训练集中没有的标签: {unknown}", column=schema.label_name)
    return as_text.map(index).to_numpy(dtype=np.int64)


def transform_frame(frame: pd.DataFrame, schema: FeatureSchema) -> np.ndarray:
    """
    按 schema 把原始列转成 [0,1] 特征：连续列做 min-max 缩放并裁剪，离散列展开为 one-hot。
    训练集中没有的类别编码为全零 one-hot 组，并给出告警。
    """
    _check_columns(frame, [c.name for c in schema.columns])
    parts: List[np.ndarray] = []
    for col in schema.columns:
        if col.kind == "continuous":
            values = _numeric_column(frame, col.name)
            span = col.max - col.min
            if span == 0.0:
                parts.append(np.full((len(frame), 1), CONSTANT_COLUMN_VALUE))
            else:
                parts.append(np.clip((values - col.min) / span, 0.0, 1.0)[:, None])
        else:
            text = frame[col.name].astype(str)
            block = np.zeros((len(frame), col.width))
            index = {c: i for i, c in enumerate(col.categories)}
            codes = text.map(index)
            unknown = codes.isna()
            if unknown.any():
                logger.warning(
                    f"⚠️ 离散列 '{col.name}' 出现 {int(unknown.sum())} 个未知类别 "
                    f"(例如 {text[unknown].iloc[0]!r})，已编码为全零 one-hot。"
                )
            known = ~unknown.to_numpy()
            block[np.flatnonzero(known), codes[known].to_numpy(dtype=np.int64)] = 1.0
            parts.append(block)
    return np.hstack(parts) if parts else np.zeros((len(frame), 0))


def csv_ingest(path: str | Path | pd.DataFrame, spec: IngestSpec) -> Dataset:
    """读取训练 CSV，拟合 schema 并完成预处理。"""
    frame = _read_csv(path)
    if spec.label not in frame.columns:
        raise DataIngestError(f"缺少标签列 '{spec.label}'", column=spec.label)
    if frame.empty:
        raise DataIngestError("CSV 中没有数据行")
    schema = fit_schema(frame, spec)
    data = Dataset(transform_frame(frame, schema), _encode_labels(frame, schema), schema)
    logger.info(
        f"  ✅ 读取 {len(data)} 行，{len(schema.columns)} 个原始列 → {schema.n_features} 维特征，"
        f"{schema.n_classes} 个类别。"
    )
    return data


def apply_schema(frame_or_path: pd.DataFrame | str | Path, schema: FeatureSchema) -> Dataset:
    """用训练集的统计量转换测试集。"""
    frame = _read_csv(frame_or_path)
    return Dataset(transform_frame(frame, schema), _encode_labels(frame, schema), schema)


def csv_ingest_split(path: str | Path | pd.DataFrame, spec: IngestSpec, seed: int) -> Tuple[Dataset, Dataset]:
    """
    没有单独测试文件时，先按 seed 把原始行二分，再只用训练一半拟合 schema。
    测试一半中的极值被裁剪到 [0,1]，未见过的类别编码为全零组。
    类别标签集合取自整个文件，测试一半独有的标签不会导致报错。
    """
    frame = _read_csv(path)
    if spec.label not in frame.columns:
        raise DataIngestError(f"缺少标签列 '{spec.label}'", column=spec.label)
    if len(frame) < 2:
        raise DataIngestError(f"CSV 至少需要 2 行才能二分，得到 {len(frame)}")
    train_idx, test_idx = split_half_indices(len(frame), seed)
    train_frame = frame.iloc[train_idx].reset_index(drop=True)
    test_frame = frame.iloc[test_idx].reset_index(drop=True)

    schema = fit_schema(train_frame, spec)
    if frame[spec.label].isna().any():
        raise DataIngestError(f"标签列 '{spec.label}' 中存在缺失值", column=spec.label)
    schema.class_names = _sorted_classes(frame[spec.label])
    train = Dataset(transform_frame(train_frame, schema), _encode_labels(train_frame, schema), schema)
    test = apply_schema(test_frame, schema)
    logger.info(
        f"  ✅ 随机二分 {len(frame)} 行：训练 {len(train)} 行 (拟合 schema)，测试 {len(test)} 行，"
        f"{schema.n_features} 维特征，{schema.n_classes} 个类别。"
    )
    return train, test


def inverse_transform(features: np.ndarray, schema: FeatureSchema) -> pd.DataFrame:
    """把 [0,1] 特征还原为原始单位；one-hot 组取 argmax，全零组还原为缺失值。"""
    features = np.asarray(features, dtype=np.float64)
    out: Dict[str, object] = {}
    for col, cols in schema.groups():
        block = features[:, cols]
        if col.kind == "continuous":
            out[col.name] = block[:, 0] * (col.max - col.min) + col.min
        else:
            names = np.asarray(col.categories, dtype=object)[np.argmax(block, axis=1)]
            names[block.max(axis=1) <= 0.0] = None
            out[col.name] = names
    return pd.DataFrame(out)


def harden_one_hot(features: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """每个 one-hot 组按 argmax 取硬编码 (生成器的 sigmoid 输出是软值)。"""
    hard = np.array(features, dtype=np.float64, copy=True)
    for cols in schema.one_hot_groups():
        block = hard[:, cols]
        winner = np.argmax(block, axis=1)
        block[:] = 0.0
        block[np.arange(block.shape[0]), winner] = 1.0
        hard[:, cols] = block
    return hard


# ======================================================================
# --- 导出 / 重新读取 ---
# ======================================================================

def sidecar_path(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".schema.yaml")


def export_dataset(data: Dataset, path: str | Path, harden: bool = True) -> Tuple[Path, Path]:
    """
    以处理后的特征空间导出 CSV (表头为特征名 + 标签列)，并写出 schema 旁车文件。
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    features = harden_one_hot(data.features, data.schema) if harden else data.features
    frame = pd.DataFrame(features, columns=data.schema.feature_names())
    frame[data.schema.label_name] = np.asarray(data.schema.class_names, dtype=object)[data.labels]
    frame.to_csv(path, index=False, encoding="utf-8")

    side = sidecar_path(path)
    payload = data.schema.to_dict()
    payload["data_format"] = config.FORMAT_DATASET_CSV
    payload["hardened"] = bool(harden)
    with open(side, "w", encoding="utf-8") as f:
        yaml.safe_dump(payload, f, sort_keys=False, allow_unicode=True)
    return path, side


def load_exported(path: str | Path) -> Dataset:
    """读取 export_dataset 的输出，数值逐位还原。"""
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise DataIngestError(f"找不到 schema 旁车文件: {side}")
    with open(side, "r", encoding="utf-8") as f:
        payload = yaml.safe_load(f)
    if payload.get("data_format") != config.FORMAT_DATASET_CSV:
        raise DataIngestError(f"数据文件格式标签不匹配: {payload.get('data_format')!r}")
    schema = FeatureSchema.from_dict(payload)
    if not path.exists():
        raise DataIngestError(f"数据文件未找到: {path}")
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip",
                        dtype={schema.label_name: str})
    names = schema.feature_names()
    _check_columns(frame, [*names, schema.label_name])
    features = frame[names].to_numpy(dtype=np.float64)
    return Dataset(features, _encode_labels(frame, schema), schema)


# ======================================================================
# --- 随机二分 ---
# ======================================================================

def split_half_indices(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """不相交的两半，大小分别为 ⌊n/2⌋ 与 ⌈n/2⌉，索引各自升序。"""
    if n < 2:
        raise ValueError(f"至少需要 2 行才能二分，得到 {n}")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def split_half_random(data: Dataset, seed: int) -> Tuple[Dataset, Dataset]:
    first, second = split_half_indices(len(data), seed)
    return data.subset(first), data.subset(second)


def split_hash(indices: np.ndarray) -> str:
    """索引集合的短哈希，用于清单中标识预训练划分。"""
    canonical = np.sort(np.asarray(indices, dtype=np.int64))
    return hashlib.sha256(canonical.tobytes()).hexdigest()[:16]
