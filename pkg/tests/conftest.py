"""测试共用的夹具与数值工具：有限差分梯度、置换检验、小型数据集。"""

import os
from typing import Callable

import numpy as np
import pytest

from src.bcgan_toolkit import data_io

# 长时间的验收实验 (多种子 GAN 训练) 只在设置该环境变量时运行
RUN_SLOW = bool(os.getenv("BCGAN_RUN_SLOW"))
slow = pytest.mark.skipif(not RUN_SLOW, reason="设置 BCGAN_RUN_SLOW=1 才运行长时间实验")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """中心差分近似 ∂f/∂x，x 不会被修改。"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    return float(np.abs(a - b).max() / scale)


def permutation_p_value(stat: Callable[[np.ndarray, np.ndarray], float], x: np.ndarray, y: np.ndarray,
                        n_permutations: int = 200, seed: int = 0) -> float:
    """双样本置换检验：打乱合并样本，统计量不小于观测值的比例。"""
    rng = np.random.default_rng(seed)
    observed = stat(x, y)
    pooled = np.vstack([x, y])
    n = len(x)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(len(pooled))
        if stat(pooled[perm[:n]], pooled[perm[n:]]) >= observed:
            hits += 1
    return (hits + 1) / (n_permutations + 1)


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture
def toy_train():
    return data_io.toy2d_generate("two_gaussians", 400, noise=0.06, seed=11)


@pytest.fixture
def toy_test():
    return data_io.toy2d_generate("two_gaussians", 400, noise=0.06, seed=12)


@pytest.fixture
def mixed_csv(tmp_path):
    """含连续列、离散列和字符串标签的小 CSV。"""
    rng = np.random.default_rng(3)
    n = 60
    age = rng.integers(18, 80, size=n)
    income = rng.normal(50.0, 10.0, size=n).round(2)
    color = rng.choice(["red", "green", "blue"], size=n)
    label = np.where(age > 45, "old", "young")
    path = tmp_path / "people.csv"
    lines = ["age,income,color,label"]
    lines += [f"{a},{i},{c},{l}" for a, i, c, l in zip(age, income, color, label)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def ingest_spec():
    return data_io.IngestSpec(label="label", discrete=["color"], continuous=["age", "income"])
