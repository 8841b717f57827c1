# src/bcgan_toolkit/mmd.py

"""
高斯核、MMD² 估计量与边界校准损失 (BC-loss)。

所有函数同时接受 numpy 数组和 Tensor：两侧都是数组时返回 float，
任意一侧带计算图时返回可导的标量 Tensor (梯度只流向带图的一侧)。
"""

import logging
from dataclasses import dataclass
from typing import Literal, Protocol, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import nn
from . import tensor_core as tc
from .errors import ShapeError
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

BandwidthMode = Literal["fixed", "median_heuristic"]


@dataclass(frozen=True)
class KernelConfig:
    """固定带宽 σ，或者每个批次用中位数启发式重新估计。"""
    mode: BandwidthMode = "median_heuristic"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.mode not in ("fixed", "median_heuristic"):
            raise ValueError(f"未知的带宽模式: '{self.mode}'")
        if self.mode == "fixed" and (self.bandwidth is None or not self.bandwidth > 0):
            raise ValueError(f"固定带宽模式下 σ 必须 > 0，得到 {self.bandwidth}")

    @classmethod
    def fixed(cls, sigma: float) -> "KernelConfig":
        return cls(mode="fixed", bandwidth=float(sigma))


class PosteriorClassifier(Protocol):
    """bc_loss 所需的冻结分类器接口。"""

    def logits(self, x: np.ndarray) -> np.ndarray: ...

    def logits_graph(self, x: Tensor) -> Tensor: ...


def _values(x: Tensor | np.ndarray) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_matrix(x: Tensor | np.ndarray) -> Tensor | np.ndarray:
    if isinstance(x, Tensor):
        if x.values.ndim != 2:
            raise ShapeError(f"样本矩阵必须是二维的，得到形状 {x.shape}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"样本矩阵必须是二维的，得到形状 {arr.shape}")
    return arr


def median_heuristic(z: Tensor | np.ndarray) -> float:
    """
    σ = sqrt(median(‖z_i − z_j‖²) / 2)，i < j，取下中位数；中位数为 0 时回退到 σ = 1。
    """
    z = _values(_as_matrix(z))
    if z.shape[0] < 2:
        raise ValueError(f"中位数启发式至少需要 2 行样本，得到 {z.shape[0]}")
    sq = np.sort(pdist(z, "sqeuclidean"))
    median = sq[(sq.size - 1) // 2]
    if median <= 0.0:
        return 1.0
    return float(np.sqrt(median / 2.0))


def resolve_bandwidth(cfg: KernelConfig, pooled: Tensor | np.ndarray) -> float:
    if cfg.mode == "fixed":
        return float(cfg.bandwidth)
    return median_heuristic(pooled)


def _pooled(x, y) -> np.ndarray:
    return np.vstack([_values(x), _values(y)])


def gaussian_kernel(x: Tensor | np.ndarray, y: Tensor | np.ndarray,
                    cfg: KernelConfig | float) -> Tensor | np.ndarray:
    """K[i, j] = exp(−‖x_i − y_j‖² / (2σ²))。"""
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"核矩阵两侧的列数不一致: {x.shape} 与 {y.shape}")
    if isinstance(cfg, KernelConfig):
        sigma = resolve_bandwidth(cfg, _pooled(x, y))
    else:
        sigma = float(cfg)
    if not sigma > 0:
        raise ValueError(f"核带宽 σ 必须 > 0，得到 {sigma}")
    gamma = 1.0 / (2.0 * sigma * sigma)
    if isinstance(x, Tensor) or isinstance(y, Tensor):
        return tc.exp(tc.scale(tc.pairwise_sq_dists(x, y), -gamma))
    return np.exp(-gamma * cdist(x, y, "sqeuclidean"))


def _check_sizes(x, y) -> tuple[int, int]:
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"MMD 估计量要求两侧样本数都 ≥ 2，得到 n={n}, m={m}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"两组样本的维度不一致: {x.shape} 与 {y.shape}")
    return n, m


def _kernel_sum(k: Tensor | np.ndarray) -> Tensor | float:
    return tc.reduce_sum(k) if isinstance(k, Tensor) else float(np.sum(k))


def _combine(terms: Sequence[tuple[float, Tensor | float]], offset: float) -> Tensor | float:
    """Σ coef·term + offset，有 Tensor 时在图上组合。"""
    if not any(isinstance(t, Tensor) for _, t in terms):
        return sum(c * t for c, t in terms) + offset
    total: Tensor | float = offset
    for coef, term in terms:
        part = tc.scale(term, coef) if isinstance(term, Tensor) else coef * term
        total = tc.add(total, part) if isinstance(total, Tensor) or isinstance(part, Tensor) else total + part
    return total


def mmd2_unbiased(x: Tensor | np.ndarray, y: Tensor | np.ndarray,
                  cfg: KernelConfig | float = KernelConfig()) -> Tensor | float:
    """
    无偏 MMD² 估计量 (U-statistic)：

        1/(n(n−1)) Σ_{i≠i'} k(x_i, x_i') + 1/(m(m−1)) Σ_{j≠j'} k(y_j, y_j') − 2/(nm) Σ_{i,j} k(x_i, y_j)

    结果可能为负。σ 为 KernelConfig 时在合并样本上解析 (中位数启发式每次调用重新估计)。
    """
    x, y = _as_matrix(x), _as_matrix(y)
    n, m = _check_sizes(x, y)
    sigma = resolve_bandwidth(cfg, _pooled(x, y)) if isinstance(cfg, KernelConfig) else float(cfg)
    kxx = _kernel_sum(gaussian_kernel(x, x, sigma))
    kyy = _kernel_sum(gaussian_kernel(y, y, sigma))
    kxy = _kernel_sum(gaussian_kernel(x, y, sigma))
    # 高斯核对角线恒为 1，去掉 i = i' 项等价于减去 n (或 m)
    a, b = 1.0 / (n * (n - 1)), 1.0 / (m * (m - 1))
    return _combine([(a, kxx), (b, kyy), (-2.0 / (n * m), kxy)], offset=-(a * n + b * m))


def mmd2_biased(x: Tensor | np.ndarray, y: Tensor | np.ndarray,
                cfg: KernelConfig | float = KernelConfig()) -> Tensor | float:
    """有偏 (V-statistic) 版本，包含对角项，恒 ≥ 0。"""
    x, y = _as_matrix(x), _as_matrix(y)
    n, m = _check_sizes(x, y)
    sigma = resolve_bandwidth(cfg, _pooled(x, y)) if isinstance(cfg, KernelConfig) else float(cfg)
    kxx = _kernel_sum(gaussian_kernel(x, x, sigma))
    kyy = _kernel_sum(gaussian_kernel(y, y, sigma))
    kxy = _kernel_sum(gaussian_kernel(x, y, sigma))
    return _combine([(1.0 / (n * n), kxx), (1.0 / (m * m), kyy), (-2.0 / (n * m), kxy)], offset=0.0)


def bc_loss(
    x_real: np.ndarray,
    x_fake: Tensor | np.ndarray,
    classifiers: Sequence[PosteriorClassifier],
    cfg: KernelConfig = KernelConfig(),
    estimator: Literal["unbiased", "biased"] = "unbiased",
) -> Tensor | float:
    """
    边界校准损失：对每个冻结分类器 C，比较真实批次与生成批次的后验分布，

        (1/|ℂ|) Σ_C MMD²(softmax(C(x_real)), softmax(C(x_fake)))

    分类器参数作为常量参与计算，梯度只流入 x_fake。
    """
    if not classifiers:
        raise ValueError("BC-loss 需要至少一个预训练分类器")
    if estimator not in ("unbiased", "biased"):
        raise ValueError(f"未知的估计量: '{estimator}'")
    mmd2 = mmd2_unbiased if estimator == "unbiased" else mmd2_biased
    x_real = np.asarray(x_real, dtype=np.float64)
    if x_real.shape[0] < 2 or x_fake.shape[0] < 2:
        raise ValueError(f"BC-loss 的批大小必须 ≥ 2，得到 real={x_real.shape[0]}, fake={x_fake.shape[0]}")

    terms = []
    for clf in classifiers:
        p_real = nn.softmax_posterior(clf.logits(x_real))
        if isinstance(x_fake, Tensor):
            p_fake = nn.softmax_posterior(clf.logits_graph(x_fake))
        else:
            p_fake = nn.softmax_posterior(clf.logits(np.asarray(x_fake, dtype=np.float64)))
        terms.append(mmd2(p_real, p_fake, cfg))

    weight = 1.0 / len(terms)
    if not any(isinstance(t, Tensor) for t in terms):
        return weight * sum(terms)
    total = terms[0]
    for term in terms[1:]:
        total = tc.add(total, term)
    return tc.scale(total, weight)
