# src/bcgan_toolkit/compat_eval.py

"""
模型兼容性评估：相对准确率、特征重要性 / 特征选择的一致性、投影分类器误标率。
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from decimal import ROUND_DOWN, Decimal
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import xarray as xr
from tqdm import tqdm

from . import config
from . import nn
from .classifiers import (
    AlgorithmSpec,
    ClassifierModel,
    MlpClassifierModel,
    accuracy,
    train_algorithm,
    train_linear_svm,
    train_mlp_classifier,
    train_random_forest,
)
from .data_io import Dataset
from .errors import ProjectionUnreliableError

logger = logging.getLogger(__name__)

EvaluateFn = Callable[[AlgorithmSpec, Dataset, Dataset, int], float]


# ======================================================================
# --- 报告结构 ---
# ======================================================================

@dataclass
class AlgorithmResult:
    name: str
    acc_real: float
    acc_gen: float
    # acc_real = 0 时无定义
    relative: Optional[float]


@dataclass
class CompatReport:
    results: List[AlgorithmResult]
    average: Optional[float]
    metadata: Dict[str, Any] = field(default_factory=dict)
    interpretability: Optional[Dict[str, Any]] = None

    def result(self, name: str) -> AlgorithmResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(f"报告中没有算法 '{name}'")

    def to_dict(self) -> dict:
        return {
            "format": config.FORMAT_REPORT,
            "metadata": self.metadata,
            "results": [asdict(r) for r in self.results],
            "average": self.average,
            "interpretability": self.interpretability,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CompatReport":
        if d.get("format") != config.FORMAT_REPORT:
            raise ValueError(f"报告格式标签不匹配: {d.get('format')!r}")
        return cls(
            results=[AlgorithmResult(**r) for r in d["results"]],
            average=d["average"],
            metadata=dict(d.get("metadata", {})),
            interpretability=d.get("interpretability"),
        )

    def save_json(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
        return path

    @classmethod
    def load_json(cls, path: Path) -> "CompatReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_frame(self) -> pd.DataFrame:
        """扁平表：每行一个算法，最后一行为平均值。"""
        rows = [{
            "algorithm": r.name,
            "acc_real": r.acc_real,
            "acc_gen": r.acc_gen,
            "relative": r.relative,
            "cell": format_cell(r.acc_gen, r.relative),
        } for r in self.results]
        mean_gen = float(np.mean([r.acc_gen for r in self.results])) if self.results else None
        rows.append({
            "algorithm": "Avg.",
            "acc_real": float(np.mean([r.acc_real for r in self.results])) if self.results else None,
            "acc_gen": mean_gen,
            "relative": self.average,
            "cell": format_cell(mean_gen, self.average) if mean_gen is not None else "",
        })
        return pd.DataFrame(rows, columns=["algorithm", "acc_real", "acc_gen", "relative", "cell"])

    def save_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


# ======================================================================
# --- 单元格格式 ---
# ======================================================================

def _truncate_percent(value: float) -> Decimal:
    """fraction → 百分数，截断到一位小数。用 Decimal(repr) 避免 0.836·100 = 83.59999…"""
    return (Decimal(repr(float(value))) * 100).quantize(Decimal("0.1"), rounding=ROUND_DOWN)


def format_percent(value: Optional[float]) -> str:
    return "n/a" if value is None else str(_truncate_percent(value))


def format_cell(acc: float, relative: Optional[float]) -> str:
    """结果表单元格 “abs (rel)”，例如 acc=0.803、relative=0.9605 → '80.3 (96.0)'。"""
    return f"{format_percent(acc)} ({format_percent(relative)})"


# ======================================================================
# --- 相对准确率 ---
# ======================================================================

def default_evaluate(spec: AlgorithmSpec, train: Dataset, test: Dataset, seed: int) -> float:
    """在 train 上训练算法 spec，返回 test 上的准确率。"""
    return accuracy(train_algorithm(spec, train, seed), test)


def _evaluate_job(args) -> Tuple[str, str, float]:
    evaluate_fn, spec, source, train, test, seed = args
    return spec.name, source, float(evaluate_fn(spec, train, test, seed))


def relative_accuracy(
    real: Dataset,
    gen: Dataset,
    test: Dataset,
    algorithms: Sequence[AlgorithmSpec],
    seed: int = 0,
    evaluate_fn: EvaluateFn = default_evaluate,
    workers: int = 1,
    metadata: Optional[Mapping[str, Any]] = None,
) -> CompatReport:
    """
    对每个算法 A：分别在真实数据和生成数据上用相同超参数、相同种子训练，
    在同一测试集上评估，relative = acc(h') / acc(h)，average 为所有有定义的比值的平均。
    """
    if not algorithms:
        raise ValueError("算法集合不能为空")
    real.schema.check_compatible(gen.schema, "真实数据与生成数据")
    real.schema.check_compatible(test.schema, "真实数据与测试数据")

    jobs = [(evaluate_fn, spec, source, train, test, seed)
            for spec in algorithms
            for source, train in (("real", real), ("gen", gen))]
    scores: Dict[Tuple[str, str], float] = {}
    if workers <= 1:
        for job in tqdm(jobs, desc="兼容性评估", leave=False):
            name, source, acc = _evaluate_job(job)
            scores[(name, source)] = acc
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_evaluate_job, job) for job in jobs]
            for future in tqdm(as_completed(futures), total=len(futures), desc="兼容性评估", leave=False):
                name, source, acc = future.result()
                scores[(name, source)] = acc

    results: List[AlgorithmResult] = []
    for spec in algorithms:
        acc_real, acc_gen = scores[(spec.name, "real")], scores[(spec.name, "gen")]
        if acc_real > 0:
            relative = acc_gen / acc_real
        else:
            relative = None
            logger.warning(f"⚠️ 算法 '{spec.name}' 在真实数据上的准确率为 0，相对准确率无定义，已从平均值中排除。")
        results.append(AlgorithmResult(spec.name, acc_real, acc_gen, relative))

    defined = [r.relative for r in results if r.relative is not None]
    average = float(np.mean(defined)) if defined else None
    return CompatReport(results, average, dict(metadata or {}))


def comparison_table(reports: Mapping[str, CompatReport], real_column: str = "REAL") -> pd.DataFrame:
    """
    多个方法的报告合并为结果表：行为算法 (+ “Avg.”)，列为 REAL 与各方法，
    单元格为 “abs (rel)”，REAL 列只有绝对准确率。
    """
    if not reports:
        raise ValueError("至少需要一份报告")
    first = next(iter(reports.values()))
    names = [r.name for r in first.results]
    table: Dict[str, List[str]] = {real_column: []}
    for name in names:
        table[real_column].append(format_percent(first.result(name).acc_real))
    table[real_column].append(format_percent(float(np.mean([first.result(n).acc_real for n in names]))))
    for method, report in reports.items():
        column = [format_cell(report.result(n).acc_gen, report.result(n).relative) for n in names]
        mean_gen = float(np.mean([report.result(n).acc_gen for n in names]))
        column.append(format_cell(mean_gen, report.average))
        table[method] = column
    return pd.DataFrame(table, index=pd.Index([*names, "Avg."], name="algorithm"))


# ======================================================================
# --- 可解释性指标 ---
# ======================================================================

def rank_features(importances: np.ndarray) -> np.ndarray:
    """按重要性降序排列的特征下标，并列时下标小的在前。"""
    return np.argsort(-np.asarray(importances, dtype=np.float64), kind="stable")


def precision_at_k(ranking_real: Sequence[int], ranking_gen: Sequence[int], k: int) -> float:
    """|top-k(real) ∩ top-k(gen)| / k"""
    if k <= 0:
        raise ValueError(f"k 必须 > 0，得到 {k}")
    if k > len(ranking_real) or k > len(ranking_gen):
        raise ValueError(f"k={k} 超过了特征数 {min(len(ranking_real), len(ranking_gen))}")
    top_real = set(int(i) for i in ranking_real[:k])
    top_gen = set(int(i) for i in ranking_gen[:k])
    return len(top_real & top_gen) / k


def f1_feature_selection(selected_real: Iterable[int], selected_gen: Iterable[int]) -> float:
    """F1 = 2·|∩| / (|real| + |gen|)，两个集合都为空时定义为 1.0。"""
    a, b = set(int(i) for i in selected_real), set(int(i) for i in selected_gen)
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def interpretability_report(
    real: Dataset,
    gen: Dataset,
    seed: int = 0,
    ks: Sequence[int] = tuple(config.PRECISION_KS),
    cs: Sequence[float] = tuple(config.L1_CS),
    n_trees: int = 10,
    max_depth: int = 10,
) -> Dict[str, Any]:
    """
    - P@K：随机森林的特征重要性排序 (真实数据 vs 生成数据)
    - F1：l1 线性 SVM 选出的特征集合
    每个指标同时给出 REAL 基线：同一份真实数据换一个种子重新训练。
    超过特征数的 K 记为 None。
    """
    real.schema.check_compatible(gen.schema, "真实数据与生成数据")
    d = real.n_features
    real_seed = seed + config.REAL_BASELINE_SEED_OFFSET

    rf_ref = train_random_forest(real, n_trees, max_depth, seed)
    rf_real = train_random_forest(real, n_trees, max_depth, real_seed)
    rf_gen = train_random_forest(gen, n_trees, max_depth, seed)
    ref_rank = rank_features(rf_ref.feature_importances())
    p_at_k: Dict[str, Dict[str, Optional[float]]] = {}
    for k in ks:
        if k > d:
            logger.warning(f"⚠️ K={k} 超过特征数 {d}，跳过 P@{k}。")
            p_at_k[str(k)] = {"real": None, "generated": None}
            continue
        p_at_k[str(k)] = {
            "real": precision_at_k(ref_rank, rank_features(rf_real.feature_importances()), k),
            "generated": precision_at_k(ref_rank, rank_features(rf_gen.feature_importances()), k),
        }

    f1: Dict[str, Dict[str, float]] = {}
    for c in cs:
        ref_sel = train_linear_svm(real, c, "l1", seed).selected_features()
        f1[str(c)] = {
            "real": f1_feature_selection(ref_sel, train_linear_svm(real, c, "l1", real_seed).selected_features()),
            "generated": f1_feature_selection(ref_sel, train_linear_svm(gen, c, "l1", seed).selected_features()),
        }
    return {"precision_at_k": p_at_k, "f1_feature_selection": f1}


# ======================================================================
# --- 栅格 ---
# ======================================================================

def decision_grid(model: ClassifierModel, resolution: int = config.GRID_RESOLUTION,
                  bounds: Tuple[float, float] = (0.0, 1.0)) -> xr.DataArray:
    """二维分类器在 [lo, hi]² 上的类别栅格，维度 (x2, x1)。"""
    if model.n_features != 2:
        raise ValueError(f"决策栅格只适用于二维输入，得到 {model.n_features} 维")
    axis = np.linspace(bounds[0], bounds[1], resolution)
    g1, g2 = np.meshgrid(axis, axis)
    classes = model.predict(np.column_stack([g1.ravel(), g2.ravel()])).reshape(resolution, resolution)
    return xr.DataArray(classes, coords={"x2": axis, "x1": axis}, dims=["x2", "x1"],
                        name="class_id", attrs={"format": config.FORMAT_GRID_CSV})


def save_grid_csv(grid: xr.DataArray, path: Path) -> Path:
    """宽表：行 = 第一个维度的坐标，列 = 第二个维度的坐标。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.to_pandas().to_csv(path)
    return path


# ======================================================================
# --- 投影分类器误标率 ---
# ======================================================================

@dataclass
class ProjectionResult:
    coords: np.ndarray            # n_gen × 2，生成样本在瓶颈层的坐标
    mislabel_rate: float
    accuracy: float
    grid: xr.DataArray            # 瓶颈平面上的类别区域


def _bottleneck(model, x: np.ndarray) -> np.ndarray:
    return nn.mlp_layers(model.spec, model.params, x)[-2].values


def train_projection_classifier(
    real: Dataset,
    seed: int = 0,
    test: Optional[Dataset] = None,
    hidden: Sequence[int] = tuple(config.PROJECTION_HIDDEN),
    epochs: int = config.PROJECTION_EPOCHS,
    min_accuracy: float = config.PROJECTION_MIN_ACCURACY,
) -> Tuple[MlpClassifierModel, float]:
    """
    在真实数据上训练输出层前带 2 单元瓶颈的 MLP。
    准确率 (有 test 时用 test，否则用训练集) 低于 min_accuracy 时抛出 ProjectionUnreliableError。
    """
    model = train_mlp_classifier(real, [*hidden, 2], epochs, seed)
    acc = accuracy(model, test if test is not None else real)
    if acc < min_accuracy:
        raise ProjectionUnreliableError(
            f"投影分类器准确率 {acc:.4f} 低于门槛 {min_accuracy}，结果不可信 (projection unreliable)",
            accuracy=acc, threshold=min_accuracy,
        )
    return model, acc


def project_samples(model: MlpClassifierModel, gen: Dataset, reference: Optional[Dataset] = None,
                    resolution: int = config.GRID_RESOLUTION) -> Tuple[np.ndarray, float, xr.DataArray]:
    """
    返回 (生成样本的瓶颈坐标, 误标率, 瓶颈平面上的类别区域栅格)。
    误标率 = 投影分类器的预测与生成标签不一致的比例。
    """
    coords = _bottleneck(model, gen.features)
    mislabel = float(np.mean(model.predict(gen.features) != gen.labels))

    spread = coords if reference is None else np.vstack([coords, _bottleneck(model, reference.features)])
    lo, hi = spread.min(axis=0), spread.max(axis=0)
    pad = 0.05 * np.maximum(hi - lo, 1e-9)
    u = np.linspace(lo[0] - pad[0], hi[0] + pad[0], resolution)
    v = np.linspace(lo[1] - pad[1], hi[1] + pad[1], resolution)
    gu, gv = np.meshgrid(u, v)
    # 类别区域只取决于最后一层
    last = model.spec.n_layers - 1
    logits = np.column_stack([gu.ravel(), gv.ravel()]) @ model.params[f"W{last}"] + model.params[f"b{last}"]
    regions = np.argmax(logits, axis=1).reshape(resolution, resolution)
    grid = xr.DataArray(regions, coords={"v": v, "u": u}, dims=["v", "u"], name="class_id")
    return coords, mislabel, grid


def projection_mislabel(
    real: Dataset,
    gen: Dataset,
    seed: int = 0,
    test: Optional[Dataset] = None,
    hidden: Sequence[int] = tuple(config.PROJECTION_HIDDEN),
    epochs: int = config.PROJECTION_EPOCHS,
    min_accuracy: float = config.PROJECTION_MIN_ACCURACY,
    resolution: int = config.GRID_RESOLUTION,
) -> ProjectionResult:
    """训练投影分类器并把生成样本投影到二维平面。"""
    real.schema.check_compatible(gen.schema, "真实数据与生成数据")
    model, acc = train_projection_classifier(real, seed, test, hidden, epochs, min_accuracy)
    coords, mislabel, grid = project_samples(model, gen, real, resolution)
    logger.info(f"  ✅ 投影分类器准确率 {acc:.4f}，生成样本误标率 {mislabel:.2%}")
    return ProjectionResult(coords, mislabel, acc, grid)
