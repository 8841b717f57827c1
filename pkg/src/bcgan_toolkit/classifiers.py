# src/bcgan_toolkit/classifiers.py

"""
下游学习算法与预训练分类器集合。

- DecisionTreeModel: CART (Gini)，阈值取相邻唯一值的中点，x <= 阈值走左子树
- RandomForestModel: bootstrap + 每次分裂随机选 √d 个特征
- LinearSvmModel: one-vs-rest 线性 SVM，l1/l2 正则，固定步长序列的次梯度下降
- MlpClassifierModel: 交叉熵 + Adam 训练的 MLP

所有模型都满足 predict(x) == argmax(posterior(x))。
"""

import logging
from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import softmax
from tqdm import tqdm

from . import config
from . import nn
from . import tensor_core as tc
from .data_io import Dataset, split_half_indices, split_hash
from .errors import NonFiniteError
from .tensor_core import Graph, Tensor

logger = logging.getLogger(__name__)

# 相等 Gini 的判定容差，保证 “最低特征、最低阈值” 的确定性选择
GINI_TIE_TOL: float = 1e-12
# 线性 SVM 次梯度下降的固定步长序列 lr_t = SVM_LR0 / sqrt(t + 1)
SVM_LR0: float = 0.5
SVM_ITERATIONS: int = 2000
# 小批量大小；每轮按 seed 重新打乱
SVM_BATCH_SIZE: int = 32


def _check_nonempty(data: Dataset) -> None:
    if len(data) == 0:
        raise ValueError("训练数据为空")


# ======================================================================
# --- 模型基类 ---
# ======================================================================

class ClassifierModel(ABC):
    """所有分类器的公共接口：posterior / predict / 序列化。"""

    kind: ClassVar[str] = ""

    def __init__(self, n_classes: int, n_features: int):
        self.n_classes = int(n_classes)
        self.n_features = int(n_features)
        self.meta: Dict[str, Any] = {}

    @abstractmethod
    def posterior(self, x: np.ndarray) -> np.ndarray:
        """n × |Y| 的后验矩阵，每行位于概率单纯形上。"""

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax 在并列时取最小的类别编号
        return np.argmax(self.posterior(x), axis=1)

    def feature_importances(self) -> Optional[np.ndarray]:
        return None

    @abstractmethod
    def to_arrays(self) -> Dict[str, np.ndarray]: ...

    @abstractmethod
    def hyper(self) -> Dict[str, Any]: ...

    @classmethod
    @abstractmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], meta: Mapping) -> "ClassifierModel": ...


def accuracy(model: ClassifierModel, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("不能在空数据集上计算准确率")
    return float(np.mean(model.predict(data.features) == data.labels))


# ======================================================================
# --- 决策树 ---
# ======================================================================

@dataclass
class TreeNode:
    """扁平存储的树节点。叶子节点的 feature = -1，left/right = -1。"""
    feature: int
    threshold: float
    left: int
    right: int
    counts: np.ndarray
    depth: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


def _gini(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    p = counts / np.maximum(totals, 1)
    return 1.0 - np.sum(p * p, axis=-1)


def _best_split(x: np.ndarray, y_onehot: np.ndarray, features: Sequence[int]
                ) -> Optional[Tuple[int, float, float]]:
    """
    在给定特征上寻找加权 Gini 最小的分裂，返回 (特征, 阈值, 加权 Gini)。
    没有任何可分的特征时返回 None。
    """
    n = x.shape[0]
    total = y_onehot.sum(axis=0)
    best: Optional[Tuple[int, float, float]] = None
    for f in sorted(features):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        valid = np.flatnonzero(xs[:-1] < xs[1:])
        if valid.size == 0:
            continue
        left = np.cumsum(y_onehot[order], axis=0)[valid]
        right = total - left
        n_left = (valid + 1).astype(np.float64)
        n_right = n - n_left
        weighted = (n_left * _gini(left) + n_right * _gini(right)) / n
        i = int(np.argmin(weighted))
        lo, hi = xs[valid[i]], xs[valid[i] + 1]
        threshold = 0.5 * (lo + hi)
        if threshold >= hi:
            threshold = lo
        if best is None or weighted[i] < best[2] - GINI_TIE_TOL:
            best = (f, float(threshold), float(weighted[i]))
    return best


def grow_tree(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    max_depth: int,
    rng: Optional[np.random.Generator] = None,
    max_features: Optional[int] = None,
) -> Tuple[List[TreeNode], np.ndarray]:
    """
    构建一棵 CART 树，返回 (节点列表, 未归一化的 Gini 重要性)。
    max_features 不为空时，每次分裂从全部特征中无放回抽取该数量的候选特征。
    """
    n, d = x.shape
    y_onehot = nn.one_hot(y, n_classes)
    nodes: List[TreeNode] = []
    importance = np.zeros(d)
    # (样本索引, 深度, 父节点编号, 是否左孩子)
    stack: List[Tuple[np.ndarray, int, int, bool]] = [(np.arange(n), 0, -1, True)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        counts = y_onehot[idx].sum(axis=0)
        node_id = len(nodes)
        nodes.append(TreeNode(-1, 0.0, -1, -1, counts, depth))
        if parent >= 0:
            if is_left:
                nodes[parent].left = node_id
            else:
                nodes[parent].right = node_id

        impurity = float(_gini(counts))
        if depth >= max_depth or impurity <= 0.0 or idx.size < 2:
            continue
        if max_features is not None and max_features < d:
            candidates = rng.choice(d, size=max_features, replace=False)
        else:
            candidates = range(d)
        split = _best_split(x[idx], y_onehot[idx], candidates)
        if split is None:
            continue
        feature, threshold, weighted = split
        importance[feature] += idx.size / n * (impurity - weighted)
        nodes[node_id].feature = feature
        nodes[node_id].threshold = threshold
        go_left = x[idx, feature] <= threshold
        # 先压右孩子，保证左子树先展开 (节点编号顺序确定)
        stack.append((idx[~go_left], depth + 1, node_id, False))
        stack.append((idx[go_left], depth + 1, node_id, True))
    return nodes, importance


def _normalize_importance(raw: np.ndarray) -> np.ndarray:
    total = raw.sum()
    if total <= 0.0:
        return np.full(raw.shape, 1.0 / raw.size)
    return raw / total


class DecisionTreeModel(ClassifierModel):
    kind = "decision_tree"

    def __init__(self, nodes: List[TreeNode], n_classes: int, n_features: int,
                 max_depth: int, importances: np.ndarray):
        super().__init__(n_classes, n_features)
        self.nodes = nodes
        self.max_depth = int(max_depth)
        self.importances = importances
        self._feature = np.array([nd.feature for nd in nodes], dtype=np.int64)
        self._threshold = np.array([nd.threshold for nd in nodes])
        self._left = np.array([nd.left for nd in nodes], dtype=np.int64)
        self._right = np.array([nd.right for nd in nodes], dtype=np.int64)
        counts = np.vstack([nd.counts for nd in nodes])
        self._leaf_posterior = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)

    @property
    def depth(self) -> int:
        return max(nd.depth for nd in self.nodes)

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        current = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            internal = self._feature[current] >= 0
            if not internal.any():
                return current
            r, c = rows[internal], current[internal]
            go_left = x[r, self._feature[c]] <= self._threshold[c]
            current[r] = np.where(go_left, self._left[c], self._right[c])

    def posterior(self, x: np.ndarray) -> np.ndarray:
        return self._leaf_posterior[self.leaf_index(x)]

    def feature_importances(self) -> np.ndarray:
        return _normalize_importance(self.importances)

    def to_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {
            f"{prefix}feature": self._feature,
            f"{prefix}threshold": self._threshold,
            f"{prefix}left": self._left,
            f"{prefix}right": self._right,
            f"{prefix}counts": np.vstack([nd.counts for nd in self.nodes]),
            f"{prefix}depth": np.array([nd.depth for nd in self.nodes], dtype=np.int64),
            f"{prefix}importance": self.importances,
        }

    def hyper(self) -> Dict[str, Any]:
        return {"max_depth": self.max_depth}

    @classmethod
    def from_arrays(cls, arrays, meta, prefix: str = "") -> "DecisionTreeModel":
        nodes = [
            TreeNode(int(f), float(t), int(lf), int(rt), np.array(c), int(dp))
            for f, t, lf, rt, c, dp in zip(
                arrays[f"{prefix}feature"], arrays[f"{prefix}threshold"], arrays[f"{prefix}left"],
                arrays[f"{prefix}right"], arrays[f"{prefix}counts"], arrays[f"{prefix}depth"],
            )
        ]
        return cls(nodes, meta["n_classes"], meta["n_features"], meta["hyper"]["max_depth"],
                   np.array(arrays[f"{prefix}importance"]))


def train_decision_tree(data: Dataset, max_depth: int, seed: int = 0) -> DecisionTreeModel:
    """CART 决策树。不做特征抽样时训练过程与 seed 无关。"""
    _check_nonempty(data)
    if max_depth < 1:
        raise ValueError(f"max_depth 必须 ≥ 1，得到 {max_depth}")
    nodes, importance = grow_tree(data.features, data.labels, data.n_classes, max_depth,
                                  rng=np.random.default_rng(seed))
    return DecisionTreeModel(nodes, data.n_classes, data.n_features, max_depth, importance)


# ======================================================================
# --- 随机森林 ---
# ======================================================================

class RandomForestModel(ClassifierModel):
    kind = "random_forest"

    def __init__(self, trees: List[DecisionTreeModel], n_classes: int, n_features: int,
                 max_depth: int, bootstrap: bool, max_features: Optional[int]):
        super().__init__(n_classes, n_features)
        self.trees = trees
        self.max_depth = int(max_depth)
        self.bootstrap = bool(bootstrap)
        self.max_features = max_features

    def posterior(self, x: np.ndarray) -> np.ndarray:
        return np.mean([t.posterior(x) for t in self.trees], axis=0)

    def feature_importances(self) -> np.ndarray:
        """各棵树归一化重要性的平均，再整体归一化。"""
        return _normalize_importance(np.mean([t.feature_importances() for t in self.trees], axis=0))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for i, tree in enumerate(self.trees):
            arrays.update(tree.to_arrays(prefix=f"tree{i}/"))
        return arrays

    def hyper(self) -> Dict[str, Any]:
        return {"n_trees": len(self.trees), "max_depth": self.max_depth,
                "bootstrap": self.bootstrap, "max_features": self.max_features}

    @classmethod
    def from_arrays(cls, arrays, meta) -> "RandomForestModel":
        h = meta["hyper"]
        tree_meta = {**meta, "hyper": {"max_depth": h["max_depth"]}}
        trees = [DecisionTreeModel.from_arrays(arrays, tree_meta, prefix=f"tree{i}/")
                 for i in range(h["n_trees"])]
        return cls(trees, meta["n_classes"], meta["n_features"], h["max_depth"],
                   h["bootstrap"], h["max_features"])


def train_random_forest(
    data: Dataset,
    n_trees: int,
    max_depth: int,
    seed: int = 0,
    bootstrap: bool = True,
    max_features: int | Literal["sqrt"] | None = "sqrt",
) -> RandomForestModel:
    """
    Bootstrap 采样 + 每次分裂 √d 个候选特征。
    bootstrap=False 且 max_features=None 时，单棵树的森林与决策树完全相同。
    """
    _check_nonempty(data)
    if n_trees < 1:
        raise ValueError(f"n_trees 必须 ≥ 1，得到 {n_trees}")
    if max_depth < 1:
        raise ValueError(f"max_depth 必须 ≥ 1，得到 {max_depth}")
    n, d = data.features.shape
    if max_features == "sqrt":
        max_features = max(1, int(np.sqrt(d)))
    rng = np.random.default_rng(seed)
    trees: List[DecisionTreeModel] = []
    for _ in range(n_trees):
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        nodes, importance = grow_tree(data.features[idx], data.labels[idx], data.n_classes,
                                      max_depth, rng=rng, max_features=max_features)
        trees.append(DecisionTreeModel(nodes, data.n_classes, d, max_depth, importance))
    return RandomForestModel(trees, data.n_classes, d, max_depth, bootstrap, max_features)


# ======================================================================
# --- 线性 SVM ---
# ======================================================================

class LinearSvmModel(ClassifierModel):
    kind = "linear_svm"

    def __init__(self, weights: np.ndarray, bias: np.ndarray, n_classes: int, n_features: int,
                 c: float, penalty: str):
        super().__init__(n_classes, n_features)
        self.weights = weights          # d × |Y|
        self.bias = bias                # 1 × |Y|
        self.c = float(c)
        self.penalty = penalty

    def logits(self, x: np.ndarray) -> np.ndarray:
        """每个 one-vs-rest 分类器的决策值。"""
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def logits_graph(self, x: Tensor) -> Tensor:
        return tc.add(tc.matmul(x, self.weights), self.bias)

    def posterior(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x), axis=1)

    def selected_features(self, threshold: float = config.SELECTION_THRESHOLD) -> np.ndarray:
        """任一类别权重绝对值超过阈值的特征下标。"""
        return np.flatnonzero(np.abs(self.weights).max(axis=1) > threshold)

    def feature_importances(self) -> np.ndarray:
        return _normalize_importance(np.abs(self.weights).sum(axis=1))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def hyper(self) -> Dict[str, Any]:
        return {"C": self.c, "penalty": self.penalty}

    @classmethod
    def from_arrays(cls, arrays, meta) -> "LinearSvmModel":
        return cls(np.array(arrays["weights"]), np.array(arrays["bias"]), meta["n_classes"],
                   meta["n_features"], meta["hyper"]["C"], meta["hyper"]["penalty"])


def train_linear_svm(data: Dataset, c: float = 1.0, penalty: Literal["l1", "l2"] = "l2",
                     seed: int = 0, iterations: int = SVM_ITERATIONS,
                     batch_size: int = SVM_BATCH_SIZE) -> LinearSvmModel:
    """
    One-vs-rest 线性 SVM。每个类别最小化

        mean_i max(0, 1 − y_i (w·x_i + b)) + α R(w)，α = 1 / (C · n)

    R 为 ½‖w‖² (l2) 或 ‖w‖₁ (l1，用软阈值近端步)。随机小批量次梯度，步长 lr_t = 0.5/√(t+1)。
    每轮按 seed 打乱样本顺序；n ≤ batch_size 时退化为全批量，结果与 seed 无关。
    """
    _check_nonempty(data)
    if not c > 0:
        raise ValueError(f"C 必须 > 0，得到 {c}")
    if penalty not in ("l1", "l2"):
        raise ValueError(f"未知的正则类型: '{penalty}'")
    if batch_size < 1:
        raise ValueError(f"batch_size 必须 ≥ 1，得到 {batch_size}")
    x = data.features
    n, d = x.shape
    k = data.n_classes
    alpha = 1.0 / (c * n)
    targets = np.where(nn.one_hot(data.labels, k) > 0, 1.0, -1.0)   # n × K
    rng = np.random.default_rng(seed)
    w = np.zeros((d, k))
    b = np.zeros((1, k))
    order = np.arange(n)
    cursor = n
    for t in range(iterations):
        if n <= batch_size:
            xb, yb = x, targets
        else:
            if cursor + batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            rows = order[cursor:cursor + batch_size]
            cursor += batch_size
            xb, yb = x[rows], targets[rows]
        lr = SVM_LR0 / np.sqrt(t + 1.0)
        margin = yb * (xb @ w + b)
        active = (margin < 1.0) * yb                                  # 次梯度中的 −y_i 项
        grad_w = -(xb.T @ active) / xb.shape[0]
        grad_b = -active.sum(axis=0, keepdims=True) / xb.shape[0]
        b = b - lr * grad_b
        if penalty == "l2":
            w = w - lr * (grad_w + alpha * w)
        else:
            z = w - lr * grad_w
            w = np.sign(z) * np.maximum(np.abs(z) - lr * alpha, 0.0)
    if not (np.isfinite(w).all() and np.isfinite(b).all()):
        raise NonFiniteError("线性 SVM 训练得到非有限权重", op="train_linear_svm")
    return LinearSvmModel(w, b, k, d, c, penalty)


# ======================================================================
# --- MLP 分类器 ---
# ======================================================================

class MlpClassifierModel(ClassifierModel):
    kind = "mlp"

    def __init__(self, spec: nn.MlpSpec, params: nn.Params, n_classes: int, n_features: int,
                 epochs: int = 0, learning_rate: float = config.DEFAULT_CLASSIFIER_LR,
                 batch_size: int = config.DEFAULT_CLASSIFIER_BATCH):
        super().__init__(n_classes, n_features)
        self.spec = spec
        self.params = params
        self.epochs = int(epochs)
        self.learning_rate = float(learning_rate)
        self.batch_size = int(batch_size)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return nn.mlp_forward(self.spec, self.params, np.asarray(x, dtype=np.float64)).values

    def logits_graph(self, x: Tensor) -> Tensor:
        """参数以常量参与计算，梯度只流向 x。"""
        return nn.mlp_forward(self.spec, self.params, x)

    def posterior(self, x: np.ndarray) -> np.ndarray:
        return nn.softmax_posterior(self.logits(x))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return dict(self.params)

    def hyper(self) -> Dict[str, Any]:
        return {"spec": self.spec.to_dict(), "epochs": self.epochs,
                "learning_rate": self.learning_rate, "batch_size": self.batch_size}

    @classmethod
    def from_arrays(cls, arrays, meta) -> "MlpClassifierModel":
        h = meta["hyper"]
        return cls(nn.MlpSpec.from_dict(h["spec"]), {k: np.array(v) for k, v in arrays.items()},
                   meta["n_classes"], meta["n_features"], h["epochs"], h["learning_rate"], h["batch_size"])


def train_mlp_classifier(
    data: Dataset,
    hidden: Sequence[int] = config.DEFAULT_PRETRAIN_HIDDEN,
    epochs: int = config.DEFAULT_PRETRAIN_EPOCHS,
    seed: int = 0,
    learning_rate: float = config.DEFAULT_CLASSIFIER_LR,
    batch_size: int = config.DEFAULT_CLASSIFIER_BATCH,
    progress: bool = False,
) -> MlpClassifierModel:
    """小批量交叉熵 + Adam。epochs=0 时返回随机初始化的网络。"""
    _check_nonempty(data)
    if epochs < 0:
        raise ValueError(f"epochs 必须 ≥ 0，得到 {epochs}")
    spec = nn.MlpSpec.build(data.n_features, list(hidden), data.n_classes)
    rng = np.random.default_rng(seed)
    params = nn.init_mlp_params(spec, rng)
    adam = nn.AdamState(learning_rate=learning_rate, beta1=0.9, beta2=0.999)
    n = len(data)
    for epoch in tqdm(range(epochs), desc="MLP 训练", disable=not progress, leave=False):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            g = Graph()
            bound = nn.bind_params(g, params)
            logits = nn.mlp_forward(spec, bound, data.features[idx])
            loss = nn.cross_entropy(logits, data.labels[idx])
            grads = tc.backward(g, loss)
            nn.adam_step(adam, params, nn.collect_grads(grads, bound))
        logger.debug(f"epoch {epoch + 1}/{epochs} 最后一个批次的损失 {loss.item():.4f}")
    return MlpClassifierModel(spec, params, data.n_classes, data.n_features, epochs,
                              learning_rate, batch_size)


# ======================================================================
# --- 算法名单 (roster) ---
# ======================================================================

@dataclass(frozen=True)
class AlgorithmSpec:
    """结果表中的一行：名称 + 训练函数类型 + 超参数。"""
    name: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)


ALGORITHMS: Dict[str, AlgorithmSpec] = {
    spec.name: spec for spec in [
        AlgorithmSpec("DT (d=10)", "decision_tree", {"max_depth": 10}),
        AlgorithmSpec("DT (d=20)", "decision_tree", {"max_depth": 20}),
        AlgorithmSpec("Linear SVM", "linear_svm", {"c": 1.0, "penalty": "l2"}),
        AlgorithmSpec("MLP (100)", "mlp", {"hidden": [100], "epochs": config.DEFAULT_PRETRAIN_EPOCHS}),
        AlgorithmSpec("MLP (200x2)", "mlp", {"hidden": [200, 200], "epochs": config.DEFAULT_PRETRAIN_EPOCHS}),
        AlgorithmSpec("RF (n=10, d=10)", "random_forest", {"n_trees": 10, "max_depth": 10}),
        AlgorithmSpec("RF (n=10, d=20)", "random_forest", {"n_trees": 10, "max_depth": 20}),
    ]
}

_TRAINERS = {
    "decision_tree": train_decision_tree,
    "random_forest": train_random_forest,
    "linear_svm": train_linear_svm,
    "mlp": train_mlp_classifier,
}


def roster(names: Sequence[str] = tuple(config.DEFAULT_ROSTER)) -> List[AlgorithmSpec]:
    unknown = [n for n in names if n not in ALGORITHMS]
    if unknown:
        raise KeyError(f"未知的算法名称: {unknown}。可用: {list(ALGORITHMS)}")
    return [ALGORITHMS[n] for n in names]


def train_algorithm(spec: AlgorithmSpec, data: Dataset, seed: int) -> ClassifierModel:
    if spec.kind not in _TRAINERS:
        raise KeyError(f"未知的算法类型: '{spec.kind}'")
    model = _TRAINERS[spec.kind](data, seed=seed, **dict(spec.params))
    model.meta["algorithm"] = spec.name
    return model


# ======================================================================
# --- 预训练分类器集合 ---
# ======================================================================

def _member_seeds(seed: int, k: int) -> List[Tuple[int, int]]:
    """为每个成员派生独立的 (划分种子, 训练种子)。"""
    children = np.random.SeedSequence(seed).spawn(k)
    return [tuple(int(v) for v in child.generate_state(2)) for child in children]


def _train_member(args) -> Tuple[int, MlpClassifierModel]:
    """进程池的工作函数，必须位于模块顶层才能被 pickle。"""
    index, data, split_seed, train_seed, hidden, epochs, lr, batch_size = args
    half, _ = split_half_indices(len(data), split_seed)
    model = train_mlp_classifier(data.subset(half), hidden, epochs, train_seed, lr, batch_size)
    model.meta.update({
        "member": index,
        "split_seed": split_seed,
        "train_seed": train_seed,
        "split_hash": split_hash(half),
        "train_size": int(half.size),
    })
    return index, model


def make_pretrained_set(
    data: Dataset,
    k: int = config.DEFAULT_PRETRAIN_K,
    seed: int = 0,
    hidden: Sequence[int] = config.DEFAULT_PRETRAIN_HIDDEN,
    epochs: int = config.DEFAULT_PRETRAIN_EPOCHS,
    learning_rate: float = config.DEFAULT_CLASSIFIER_LR,
    batch_size: int = config.DEFAULT_CLASSIFIER_BATCH,
    workers: int = 1,
) -> List[MlpClassifierModel]:
    """
    训练 k 个 MLP，每个只使用训练集的一个随机一半 (⌊n/2⌋ 行)。
    结果按成员编号排序，与并行完成顺序无关。
    """
    if k < 1:
        raise ValueError(f"k 必须 ≥ 1，得到 {k}")
    if len(data) < 2:
        raise ValueError(f"数据太少，无法二分: n={len(data)}")
    jobs = [(i, data, s, t, list(hidden), epochs, learning_rate, batch_size)
            for i, (s, t) in enumerate(_member_seeds(seed, k))]

    results: Dict[int, MlpClassifierModel] = {}
    if workers <= 1:
        for job in tqdm(jobs, desc="预训练分类器", leave=False):
            index, model = _train_member(job)
            results[index] = model
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_train_member, job) for job in jobs]
            for future in tqdm(as_completed(futures), total=len(futures), desc="预训练分类器", leave=False):
                index, model = future.result()
                results[index] = model
    return [results[i] for i in range(k)]


# ======================================================================
# --- 序列化与导出 ---
# ======================================================================

_MODEL_CLASSES: Dict[str, type] = {
    cls.kind: cls for cls in (DecisionTreeModel, RandomForestModel, LinearSvmModel, MlpClassifierModel)
}


def save_classifier(model: ClassifierModel, path: Path) -> Path:
    meta = {
        "kind": model.kind,
        "n_classes": model.n_classes,
        "n_features": model.n_features,
        "hyper": model.hyper(),
        "info": model.meta,
    }
    return nn.save_checkpoint(path, model.to_arrays(), meta, config.FORMAT_CLASSIFIER)


def load_classifier(path: Path) -> ClassifierModel:
    arrays, meta = nn.load_checkpoint(path, config.FORMAT_CLASSIFIER)
    cls = _MODEL_CLASSES.get(meta["kind"])
    if cls is None:
        raise ValueError(f"未知的分类器类型: '{meta['kind']}'")
    model = cls.from_arrays(arrays, meta)
    model.meta = dict(meta.get("info", {}))
    return model


def importance_frame(model: ClassifierModel, feature_names: Sequence[str]) -> pd.DataFrame:
    importances = model.feature_importances()
    if importances is None:
        raise ValueError(f"分类器 '{model.kind}' 不提供特征重要性")
    return pd.DataFrame({
        "feature_index": np.arange(importances.size),
        "name": list(feature_names),
        "importance": importances,
    })


def export_importances(model: ClassifierModel, feature_names: Sequence[str], path: Path) -> Path:
    """导出特征重要性 CSV：feature_index, name, importance。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    importance_frame(model, feature_names).to_csv(path, index=False)
    return path
