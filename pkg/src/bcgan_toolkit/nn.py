# src/bcgan_toolkit/nn.py

"""
基于 tensor_core 的网络组件：MLP、类别嵌入条件输入、Adam 优化器，以及 npz 检查点读写。

参数统一以 Dict[str, np.ndarray] 保存 (W0, b0, W1, b1, ...)，前向计算时用
bind_params 绑定为计算图上的叶子节点。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from . import config
from . import tensor_core as tc
from .errors import NonFiniteError, ShapeError
from .tensor_core import Graph, Tensor

logger = logging.getLogger(__name__)

ACTIVATIONS = ("leaky_relu", "sigmoid", "none")

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpSpec:
    """
    全连接网络结构。widths 包含输入宽度与输出宽度，activations 与每一层一一对应。
    例如 MlpSpec((2, 100, 2), ("leaky_relu", "none")) 是 MLP(100) 分类器。
    """
    widths: Tuple[int, ...]
    activations: Tuple[str, ...]
    leaky_slope: float = config.LEAKY_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError(f"MlpSpec 至少需要输入和输出两个宽度，得到 {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"MlpSpec 的所有宽度必须 ≥ 1，得到 {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError(
                f"激活函数数量 ({len(self.activations)}) 必须等于层数 ({len(self.widths) - 1})"
            )
        unknown = [a for a in self.activations if a not in ACTIVATIONS]
        if unknown:
            raise ValueError(f"未知的激活函数: {unknown}。可用: {ACTIVATIONS}")

    @classmethod
    def build(cls, in_dim: int, hidden: Sequence[int], out_dim: int,
              output_activation: str = "none", leaky_slope: float = config.LEAKY_SLOPE) -> "MlpSpec":
        """隐藏层统一使用 leaky_relu。"""
        widths = (in_dim, *hidden, out_dim)
        activations = ("leaky_relu",) * len(hidden) + (output_activation,)
        return cls(widths, activations, leaky_slope)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations),
                "leaky_slope": self.leaky_slope}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(tuple(d["widths"]), tuple(d["activations"]), float(d.get("leaky_slope", config.LEAKY_SLOPE)))


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> Params:
    """He 风格均匀初始化：W ~ U(-√(6/fan_in), √(6/fan_in))，偏置为 0。"""
    params: Params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        limit = np.sqrt(6.0 / fan_in)
        params[f"{prefix}W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}b{i}"] = np.zeros((1, fan_out))
    return params


def bind_params(g: Graph, params: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    """把参数数组登记为图上的叶子节点，返回同名的 Tensor 字典。"""
    return {name: g.leaf(value, name=name) for name, value in params.items()}


def collect_grads(grads: Mapping[int, Tensor], bound: Mapping[str, Tensor]) -> Params:
    """从 backward 的结果中取出每个参数的梯度数组。"""
    return {name: grads[t.node_id].values for name, t in bound.items()}


def _activate(h: Tensor, activation: str, slope: float) -> Tensor:
    if activation == "leaky_relu":
        return tc.leaky_relu(h, slope)
    if activation == "sigmoid":
        return tc.sigmoid(h)
    return h


def mlp_layers(spec: MlpSpec, params: Mapping[str, Tensor | np.ndarray], x: Tensor | np.ndarray,
               prefix: str = "") -> List[Tensor]:
    """逐层前向，返回每一层激活后的输出 (最后一个元素即网络输出)。"""
    x = tc.as_tensor(x)
    if x.values.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeError(f"MLP 输入宽度应为 {spec.in_dim}，得到形状 {x.shape}")
    outputs: List[Tensor] = []
    h = x
    for i, activation in enumerate(spec.activations):
        h = tc.add(tc.matmul(h, params[f"{prefix}W{i}"]), params[f"{prefix}b{i}"])
        h = _activate(h, activation, spec.leaky_slope)
        outputs.append(h)
    return outputs


def mlp_forward(spec: MlpSpec, params: Mapping[str, Tensor | np.ndarray], x: Tensor | np.ndarray,
                prefix: str = "") -> Tensor:
    return mlp_layers(spec, params, x, prefix)[-1]


# --- 类别嵌入 ---

@dataclass
class ClassEmbedding:
    """|Y| × d_emb 的可训练嵌入表。d_emb 可以为 0 (不做条件拼接)。"""
    table: np.ndarray

    @classmethod
    def init(cls, n_classes: int, dim: int, rng: np.random.Generator) -> "ClassEmbedding":
        if n_classes < 1 or dim < 0:
            raise ValueError(f"非法的嵌入表尺寸: n_classes={n_classes}, dim={dim}")
        return cls(rng.normal(0.0, 1.0, size=(n_classes, dim)))

    @property
    def n_classes(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


def one_hot(labels: Sequence[int] | np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"标签超出范围 [0, {n_classes})：最小 {labels.min()}，最大 {labels.max()}")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def condition_input(x_or_z: Tensor | np.ndarray, labels: Sequence[int] | np.ndarray,
                    table: Tensor | np.ndarray) -> Tensor:
    """
    返回 [x | emb[label_i]] 的逐行拼接。table 既可以是嵌入数组，也可以是图上的叶子节点，
    后者时梯度只会流向被查到的那些行。
    """
    x = tc.as_tensor(x_or_z)
    table_values = table.values if isinstance(table, Tensor) else np.asarray(table)
    n_classes, dim = table_values.shape
    if len(labels) != x.shape[0]:
        raise ShapeError(f"标签数量 ({len(labels)}) 与输入行数 ({x.shape[0]}) 不一致")
    onehot = one_hot(labels, n_classes)
    if dim == 0:
        return x
    return tc.concat_cols(x, tc.matmul(onehot, table))


# --- 后验与损失 ---

def softmax_posterior(logits: Tensor | np.ndarray) -> Tensor | np.ndarray:
    """按行 softmax。Tensor 输入返回可导节点，数组输入返回数组。"""
    if isinstance(logits, Tensor):
        return tc.softmax_rows(logits)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits 需要是 n × |Y| 的矩阵，得到形状 {logits.shape}")
    if not np.isfinite(logits).all():
        raise NonFiniteError("logits 中含有非有限值", op="softmax_posterior")
    return softmax(logits, axis=1)


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """平均交叉熵 −mean log softmax(logits)[y]。"""
    onehot = one_hot(labels, logits.shape[1])
    picked = tc.reduce_sum(tc.mul(tc.log_softmax_rows(logits), onehot))
    return tc.scale(picked, -1.0 / logits.shape[0])


# --- Adam ---

@dataclass
class AdamState:
    learning_rate: float = config.DEFAULT_LEARNING_RATE
    beta1: float = config.DEFAULT_BETA1
    beta2: float = config.DEFAULT_BETA2
    eps: float = config.ADAM_EPSILON
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def to_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        arrays = {f"{prefix}step": np.array([self.step], dtype=np.int64)}
        arrays.update({f"{prefix}m/{k}": v for k, v in self.m.items()})
        arrays.update({f"{prefix}v/{k}": v for k, v in self.v.items()})
        return arrays

    def hyper(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str, hyper: Mapping) -> "AdamState":
        state = cls(**hyper)
        state.step = int(arrays[f"{prefix}step"][0])
        for key, value in arrays.items():
            if key.startswith(f"{prefix}m/"):
                state.m[key[len(prefix) + 2:]] = np.array(value)
            elif key.startswith(f"{prefix}v/"):
                state.v[key[len(prefix) + 2:]] = np.array(value)
        return state


def adam_step(state: AdamState, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
    """
    原地执行一次 Adam 更新并返回 params。

    梯度恰好为 0 的元素保持参数与矩估计不变 (lazy 更新)，
    因此全零梯度对任意状态都是空操作，只有 step 计数加一。
    """
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"梯度 '{name}' 没有对应的参数")
        if grad.shape != params[name].shape:
            raise ShapeError(f"参数 '{name}' 形状 {params[name].shape} 与梯度形状 {grad.shape} 不一致")
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"参数 '{name}' 的梯度含有非有限值", op="adam_step", param=name)

    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, grad in grads.items():
        m = state.m.setdefault(name, np.zeros_like(grad))
        v = state.v.setdefault(name, np.zeros_like(grad))
        active = grad != 0.0
        if not active.any():
            continue
        m_new = state.beta1 * m + (1.0 - state.beta1) * grad
        v_new = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        update = state.learning_rate * (m_new / bias1) / (np.sqrt(v_new / bias2) + state.eps)
        np.copyto(m, m_new, where=active)
        np.copyto(v, v_new, where=active)
        params[name] = np.where(active, params[name] - update, params[name])
    return params


# --- 检查点 ---

_META_KEY = "__meta__"


def save_checkpoint(path: Path, arrays: Mapping[str, np.ndarray], metadata: Mapping, fmt: str) -> Path:
    """
    以 npz 保存数组 + JSON 元数据。数组按原始 float64 字节存储，读回后逐位一致。
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": fmt, **metadata}
    payload = {name: np.asarray(value) for name, value in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **payload)
    return path


def load_checkpoint(path: Path, expected_format: str) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"检查点文件未找到: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {name: np.array(data[name]) for name in data.files if name != _META_KEY}
        if _META_KEY not in data.files:
            raise ValueError(f"检查点缺少元数据: {path}")
        meta = json.loads(str(data[_META_KEY]))
    if meta.get("format") != expected_format:
        raise ValueError(f"检查点格式不匹配: 期望 '{expected_format}'，实际 '{meta.get('format')}'")
    return arrays, meta
