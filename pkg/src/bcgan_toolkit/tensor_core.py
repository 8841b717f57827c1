# src/bcgan_toolkit/tensor_core.py

"""
稠密张量 + 反向模式自动微分。

每个 Graph 按创建顺序记录节点，因此节点列表天然是拓扑序。反向传播的求导规则
(VJP) 本身也用本模块的算子写成：普通反向时输入被 detach 成常量，不会记录新节点；
在 input_gradient_node 中则直接使用图上的活节点，得到的梯度仍是可导的图节点，
用于梯度惩罚 (gradient penalty) 的二阶求导。
"""

import logging
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, log_softmax, softmax

from .errors import NonFiniteError, SecondOrderUnsupportedError, ShapeError

logger = logging.getLogger(__name__)

# 支持二阶求导 (即 VJP 可以继续被微分) 的算子集合。
# 评论家网络只由这些算子组成。
SECOND_ORDER_OPS = frozenset({
    "matmul", "add", "sub", "mul_elementwise", "scale", "leaky_relu",
    "sum", "mean", "square", "sqrt", "reciprocal",
    "transpose", "reshape", "broadcast_to", "concat_cols", "slice_cols",
})


class Graph:
    """一次前向计算的记录。nodes 按创建顺序排列，gradients 保存最近一次 backward 的结果。"""

    def __init__(self):
        self.nodes: list["Tensor"] = []
        self.gradients: Dict[int, "Tensor"] = {}

    def leaf(self, values, name: str | None = None) -> "Tensor":
        """在图上创建一个需要梯度的叶子节点 (复制一份数值)。"""
        tensor = Tensor(np.array(values, dtype=np.float64), name=name)
        _check_finite("leaf", tensor.values)
        self._record(tensor)
        return tensor

    def _record(self, tensor: "Tensor") -> None:
        tensor.graph = self
        tensor.node_id = len(self.nodes)
        self.nodes.append(tensor)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("values", "graph", "node_id", "op", "parents", "ctx", "name")

    def __init__(self, values, op: str = "leaf", parents: Tuple["Tensor", ...] = (), ctx=None, name: str | None = None):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"张量的每个维度都必须 ≥ 1，得到形状 {arr.shape}")
        self.values: np.ndarray = arr
        self.graph: Optional[Graph] = None
        self.node_id: Optional[int] = None
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.name = name

    # --- 基本属性 ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def requires_grad(self) -> bool:
        return self.graph is not None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"只有标量张量可以调用 item()，当前形状 {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        where = f"node={self.node_id}" if self.graph is not None else "const"
        return f"Tensor(op={self.op}, shape={self.shape}, {where})"

    # --- 运算符重载 ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)
    def __rmul__(self, other): return self.__mul__(other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


ArrayLike = Tensor | np.ndarray | float | int | Sequence


def as_tensor(x: ArrayLike) -> Tensor:
    """Tensor 原样返回，其它输入包装成常量张量 (不在任何图上)。"""
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, values: np.ndarray) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"运算 '{op}' 产生了非有限值 (NaN/Inf)", op=op)


def _common_graph(inputs: Sequence[Tensor]) -> Optional[Graph]:
    graph = None
    for t in inputs:
        if t.graph is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise ShapeError("不能在一次运算中混用两个不同计算图上的张量")
    return graph


def _make(op: str, values: np.ndarray, inputs: Sequence[Tensor], ctx=None) -> Tensor:
    _check_finite(op, values)
    graph = _common_graph(inputs)
    if graph is None:
        return Tensor(values, op=op, ctx=ctx)
    out = Tensor(values, op=op, parents=tuple(inputs), ctx=ctx)
    graph._record(out)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"'{op}' 的输入形状不兼容: {a.shape} 与 {b.shape}") from e


def _require_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.values.ndim != 2:
            raise ShapeError(f"'{op}' 需要二维输入，得到形状 {t.shape}")


# ======================================================================
# --- 前向算子 ---
# ======================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul 形状不匹配: {a.shape} @ {b.shape}")
    return _make("matmul", a.values @ b.values, (a, b))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.values + b.values, (a, b))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.values - b.values, (a, b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul_elementwise", a, b)
    return _make("mul_elementwise", a.values * b.values, (a, b))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    return _make("scale", a.values * float(factor), (a,), ctx=float(factor))


def leaky_relu(a: ArrayLike, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu 的斜率必须在 (0, 1) 内，得到 {slope}")
    a = as_tensor(a)
    mask = np.where(a.values > 0, 1.0, slope)
    return _make("leaky_relu", a.values * mask, (a,), ctx=mask)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("sigmoid", expit(a.values), (a,))


def softmax_rows(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    _require_2d("softmax_rows", a)
    return _make("softmax_rows", softmax(a.values, axis=1), (a,))


def log_softmax_rows(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    _require_2d("log_softmax_rows", a)
    return _make("log_softmax_rows", log_softmax(a.values, axis=1), (a,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        values = np.exp(a.values)
    return _make("exp", values, (a,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(a.values)
    return _make("log", values, (a,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.values * a.values, (a,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        values = np.sqrt(a.values)
    return _make("sqrt", values, (a,))


def reciprocal(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        values = 1.0 / a.values
    return _make("reciprocal", values, (a,))


def reduce_sum(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    values = np.sum(a.values, axis=axis, keepdims=keepdims)
    return _make("sum", np.reshape(values, (1,)) if axis is None and not keepdims else values,
                 (a,), ctx=(axis, keepdims))


def reduce_mean(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    values = np.mean(a.values, axis=axis, keepdims=keepdims)
    return _make("mean", np.reshape(values, (1,)) if axis is None and not keepdims else values,
                 (a,), ctx=(axis, keepdims))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        values = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"无法把形状 {a.shape} 变换为 {shape}") from e
    return _make("reshape", values, (a,), ctx=tuple(shape))


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        values = np.broadcast_to(a.values, shape).copy()
    except ValueError as e:
        raise ShapeError(f"无法把形状 {a.shape} 广播到 {shape}") from e
    return _make("broadcast_to", values, (a,), ctx=tuple(shape))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    _require_2d("transpose", a)
    return _make("transpose", a.values.T, (a,))


def concat_cols(*tensors: ArrayLike) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    _require_2d("concat_cols", *parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols 要求行数一致，得到 {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    return _make("concat_cols", np.concatenate([p.values for p in parts], axis=1), parts, ctx=widths)


def slice_cols(a: ArrayLike, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    _require_2d("slice_cols", a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"列切片 [{start}:{stop}] 超出范围，宽度 {a.shape[1]}")
    return _make("slice_cols", a.values[:, start:stop], (a,), ctx=(start, stop))


def pairwise_sq_dists(x: ArrayLike, y: ArrayLike) -> Tensor:
    """D[i, j] = ||x_i - y_j||²。"""
    x, y = as_tensor(x), as_tensor(y)
    _require_2d("pairwise_sq_dists", x, y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sq_dists 列数不一致: {x.shape} 与 {y.shape}")
    return _make("pairwise_sq_dists", cdist(x.values, y.values, "sqeuclidean"), (x, y))


_FORWARD_OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "scale": scale,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "reciprocal": reciprocal,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "transpose": transpose,
    "concat_cols": concat_cols,
    "slice_cols": slice_cols,
    "pairwise_sq_dists": pairwise_sq_dists,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """按名称调用前向算子，例如 forward_op("leaky_relu", x, slope=0.2)。"""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"未知的算子类型: '{kind}'。可用: {sorted(_FORWARD_OPS)}") from None
    return fn(*inputs, **params)


# ======================================================================
# --- 反向传播规则 (VJP) ---
# 签名: (out, inputs, grad, needs, ctx) -> 每个输入的梯度 (不需要时为 None)
# ======================================================================

def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """把广播后的梯度求和还原到输入形状。"""
    if grad.shape == shape:
        return grad
    g = grad
    while g.values.ndim > len(shape):
        g = reduce_sum(g, axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = reduce_sum(g, axis=axis, keepdims=True)
    return g if g.shape == shape else reshape(g, shape)


def _vjp_matmul(out, inputs, grad, needs, ctx):
    a, b = inputs
    ga = matmul(grad, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), grad) if needs[1] else None
    return ga, gb


def _vjp_add(out, inputs, grad, needs, ctx):
    a, b = inputs
    return (_unbroadcast(grad, a.shape) if needs[0] else None,
            _unbroadcast(grad, b.shape) if needs[1] else None)


def _vjp_sub(out, inputs, grad, needs, ctx):
    a, b = inputs
    return (_unbroadcast(grad, a.shape) if needs[0] else None,
            _unbroadcast(scale(grad, -1.0), b.shape) if needs[1] else None)


def _vjp_mul(out, inputs, grad, needs, ctx):
    a, b = inputs
    return (_unbroadcast(mul(grad, b), a.shape) if needs[0] else None,
            _unbroadcast(mul(grad, a), b.shape) if needs[1] else None)


def _vjp_scale(out, inputs, grad, needs, ctx):
    return (scale(grad, ctx),)


def _vjp_leaky_relu(out, inputs, grad, needs, ctx):
    # 分段线性: 掩码是常量，二阶导数几乎处处为零
    return (mul(grad, Tensor(ctx)),)


def _vjp_sigmoid(out, inputs, grad, needs, ctx):
    s = out.values
    return (Tensor(grad.values * s * (1.0 - s)),)


def _vjp_softmax_rows(out, inputs, grad, needs, ctx):
    s = out.values
    g = grad.values
    return (Tensor(s * (g - np.sum(g * s, axis=1, keepdims=True))),)


def _vjp_log_softmax_rows(out, inputs, grad, needs, ctx):
    g = grad.values
    return (Tensor(g - np.exp(out.values) * np.sum(g, axis=1, keepdims=True)),)


def _vjp_exp(out, inputs, grad, needs, ctx):
    return (Tensor(grad.values * out.values),)


def _vjp_log(out, inputs, grad, needs, ctx):
    return (Tensor(grad.values / inputs[0].values),)


def _vjp_square(out, inputs, grad, needs, ctx):
    return (mul(grad, scale(inputs[0], 2.0)),)


def _vjp_sqrt(out, inputs, grad, needs, ctx):
    # d sqrt(x) = 1 / (2 sqrt(x))，用 out 表达以保持可导
    return (mul(grad, scale(reciprocal(out), 0.5)),)


def _vjp_reciprocal(out, inputs, grad, needs, ctx):
    return (scale(mul(grad, square(out)), -1.0),)


def _reduced_keep_shape(in_shape: Tuple[int, ...], axis: int | None) -> Tuple[int, ...]:
    if axis is None:
        return tuple(1 for _ in in_shape)
    keep = list(in_shape)
    keep[axis] = 1
    return tuple(keep)


def _vjp_sum(out, inputs, grad, needs, ctx):
    axis, _ = ctx
    shape = inputs[0].shape
    g = reshape(grad, _reduced_keep_shape(shape, axis))
    return (broadcast_to(g, shape),)


def _vjp_mean(out, inputs, grad, needs, ctx):
    axis, _ = ctx
    shape = inputs[0].shape
    count = int(np.prod(shape)) if axis is None else shape[axis]
    g = reshape(grad, _reduced_keep_shape(shape, axis))
    return (scale(broadcast_to(g, shape), 1.0 / count),)


def _vjp_reshape(out, inputs, grad, needs, ctx):
    return (reshape(grad, inputs[0].shape),)


def _vjp_broadcast_to(out, inputs, grad, needs, ctx):
    return (_unbroadcast(grad, inputs[0].shape),)


def _vjp_transpose(out, inputs, grad, needs, ctx):
    return (transpose(grad),)


def _vjp_concat_cols(out, inputs, grad, needs, ctx):
    grads = []
    start = 0
    for width, need in zip(ctx, needs):
        grads.append(slice_cols(grad, start, start + width) if need else None)
        start += width
    return tuple(grads)


def _vjp_slice_cols(out, inputs, grad, needs, ctx):
    start, stop = ctx
    rows, total = inputs[0].shape
    parts = []
    if start > 0:
        parts.append(Tensor(np.zeros((rows, start))))
    parts.append(grad)
    if stop < total:
        parts.append(Tensor(np.zeros((rows, total - stop))))
    return (concat_cols(*parts) if len(parts) > 1 else grad,)


def _vjp_pairwise_sq_dists(out, inputs, grad, needs, ctx):
    x, y = inputs[0].values, inputs[1].values
    g = grad.values
    gx = 2.0 * (g.sum(axis=1, keepdims=True) * x - g @ y) if needs[0] else None
    gy = 2.0 * (g.sum(axis=0)[:, None] * y - g.T @ x) if needs[1] else None
    return (Tensor(gx) if gx is not None else None, Tensor(gy) if gy is not None else None)


_VJP: Dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul_elementwise": _vjp_mul,
    "scale": _vjp_scale,
    "leaky_relu": _vjp_leaky_relu,
    "sigmoid": _vjp_sigmoid,
    "softmax_rows": _vjp_softmax_rows,
    "log_softmax_rows": _vjp_log_softmax_rows,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "square": _vjp_square,
    "sqrt": _vjp_sqrt,
    "reciprocal": _vjp_reciprocal,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "reshape": _vjp_reshape,
    "broadcast_to": _vjp_broadcast_to,
    "transpose": _vjp_transpose,
    "concat_cols": _vjp_concat_cols,
    "slice_cols": _vjp_slice_cols,
    "pairwise_sq_dists": _vjp_pairwise_sq_dists,
}


# ======================================================================
# --- 反向传播 ---
# ======================================================================

def _check_scalar_root(g: Graph, root: Tensor) -> None:
    if root.values.size != 1:
        raise ShapeError(f"反向传播的根节点必须是标量，当前形状 {root.shape}")
    if root.graph is not None and root.graph is not g:
        raise ShapeError("根节点不属于给定的计算图")


def _reverse_pass(
    g: Graph,
    root: Tensor,
    create_graph: bool,
    on_path: set[int] | None = None,
) -> Dict[int, Tensor]:
    grads: Dict[int, Tensor] = {root.node_id: Tensor(np.ones_like(root.values))}
    # 切片是一个副本：create_graph 时新节点会追加到 g.nodes
    for node in reversed(g.nodes[: root.node_id + 1]):
        grad = grads.get(node.node_id)
        if grad is None or not node.parents:
            continue
        needs = tuple(
            p.graph is not None and (on_path is None or p.node_id in on_path)
            for p in node.parents
        )
        if not any(needs):
            continue
        if create_graph:
            if node.op not in SECOND_ORDER_OPS:
                raise SecondOrderUnsupportedError(
                    f"算子 '{node.op}' 不支持二阶求导，不能出现在输入梯度路径上", op=node.op
                )
            out, inputs = node, node.parents
        else:
            out, inputs = node.detach(), tuple(p.detach() for p in node.parents)
        parent_grads = _VJP[node.op](out, inputs, grad, needs, node.ctx)
        for parent, need, pg in zip(node.parents, needs, parent_grads):
            if not need or pg is None:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else add(prev, pg)
    return grads


def backward(g: Graph, root: Tensor) -> Dict[int, Tensor]:
    """
    计算标量 root 对图上所有节点的梯度。

    Returns:
        node_id -> 梯度张量。未被触及的叶子节点得到全零梯度。
    """
    _check_scalar_root(g, root)
    grads = _reverse_pass(g, root, create_graph=False) if root.graph is g else {}
    result: Dict[int, Tensor] = {}
    for node in g.nodes:
        if node.node_id in grads:
            result[node.node_id] = grads[node.node_id]
        elif node.op == "leaf":
            result[node.node_id] = Tensor(np.zeros_like(node.values))
    g.gradients = result
    return result


def input_gradient_node(g: Graph, root: Tensor, wrt: Tensor) -> Tensor:
    """
    返回 ∂root/∂wrt，结果本身是图上的活节点，可以继续对参数求导 (double backprop)。
    root 到 wrt 的路径上只允许出现 SECOND_ORDER_OPS 中的算子。
    """
    _check_scalar_root(g, root)
    if wrt.graph is not g:
        raise ShapeError("wrt 必须是给定计算图上的节点")
    if root.graph is not g:
        return Tensor(np.zeros_like(wrt.values))

    # 找出所有依赖 wrt 的节点 (在 wrt 与 root 之间)
    on_path = {wrt.node_id}
    for node in g.nodes[wrt.node_id + 1: root.node_id + 1]:
        if any(p.node_id in on_path for p in node.parents if p.graph is g):
            on_path.add(node.node_id)
    if root.node_id not in on_path:
        return Tensor(np.zeros_like(wrt.values))

    grads = _reverse_pass(g, root, create_graph=True, on_path=on_path)
    return grads[wrt.node_id]
