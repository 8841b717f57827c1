# src/bcgan_toolkit/config.py

import os
from pathlib import Path
from typing import Dict, List

from dotenv import load_dotenv


# --- 1. 项目根目录 ---
# Path(__file__) -> 当前文件路径 (config.py)
# .parent.parent -> 从 src/bcgan_toolkit/ 向上跳两级到 src/
PROJECT_ROOT = Path(__file__).resolve().parent.parent
# 日志里打印相对路径时使用的基准目录 (仓库根目录)
LOG_BASE_PATH: Path = PROJECT_ROOT.parent


# --- 2. 加载环境变量 ---
dotenv_path = LOG_BASE_PATH / '.env'
if dotenv_path.exists():
    load_dotenv(dotenv_path=dotenv_path)


# --- 3. 运行环境配置 ---
# 日志级别，可通过 BCGAN_LOG_LEVEL=DEBUG 打开详细输出
LOG_LEVEL: str = os.getenv("BCGAN_LOG_LEVEL", "INFO").upper()

# 并行工作进程数，默认使用一半 CPU 核心
NUM_WORKERS: int = int(os.getenv("NUM_WORKERS", max(1, (os.cpu_count() or 1) // 2)))


# --- 4. 项目核心文件路径配置 ---
OUTPUTS_DIR: Path = Path(os.getenv("BCGAN_OUTPUTS_DIR", str(LOG_BASE_PATH / "outputs")))
CONFIGS_DIR: Path = LOG_BASE_PATH / "configs"

# 各子命令在输出目录下使用的子目录
PRETRAIN_SUBDIR: str = "pretrained"
GAN_SUBDIR: str = "gan"
SYNTHETIC_SUBDIR: str = "synthetic"
REPORT_SUBDIR: str = "report"
PLOT_DATA_SUBDIR: str = "plot_data"


# --- 5. 输出文件格式标签 ---
# 所有落盘文件都带版本化的格式标签，读取时校验
FORMAT_CONFIG: str = "bcgan-config/1"
FORMAT_SCHEMA: str = "bcgan-schema/1"
FORMAT_CLASSIFIER: str = "bcgan-classifier/1"
FORMAT_GAN: str = "bcgan-gan/1"
FORMAT_LOSS_HISTORY: str = "bcgan-loss-history/1"
FORMAT_REPORT: str = "bcgan-report/1"
FORMAT_REPORT_CSV: str = "bcgan-report-csv/1"
FORMAT_MANIFEST: str = "bcgan-manifest/1"
FORMAT_DATASET_CSV: str = "bcgan-dataset-csv/1"
FORMAT_GRID_CSV: str = "bcgan-grid-csv/1"
FORMAT_POINTS_CSV: str = "bcgan-points-csv/1"
FORMAT_SUMMARY_CSV: str = "bcgan-summary-csv/1"
FORMAT_IMPORTANCE_CSV: str = "bcgan-importance-csv/1"


# --- 6. 网络与优化器默认参数 ---
# leaky_relu 斜率，评论家 (critic) 只使用该激活以支持二阶求导
LEAKY_SLOPE: float = 0.2
# Adam 默认参数 (WGAN-GP 常用设置)
DEFAULT_LEARNING_RATE: float = 1e-4
DEFAULT_BETA1: float = 0.5
DEFAULT_BETA2: float = 0.9
ADAM_EPSILON: float = 1e-8
# 类别嵌入的默认维度 (表格数据)
DEFAULT_EMBEDDING_DIM: int = 8
# 生成器 / 评论家隐藏层
DEFAULT_GAN_HIDDEN: List[int] = [128, 128, 128]


# --- 7. GAN 训练默认参数 ---
DEFAULT_LAMBDA_GP: float = 10.0
DEFAULT_LAMBDA_BC: float = 100.0
DEFAULT_N_CRITIC: int = 5
DEFAULT_BATCH_SIZE: int = 64
DEFAULT_NOISE_DIM: int = 16
WEIGHT_CLIP_VALUE: float = 0.01
# 梯度范数中加入的小量，保证 sqrt 在零梯度处可导
GRADIENT_NORM_EPS: float = 1e-12
# MMD-GAN 评论家输出的特征维度
DEFAULT_MMD_FEATURE_DIM: int = 16


# --- 8. 预训练分类器集合 ---
DEFAULT_PRETRAIN_K: int = 6
DEFAULT_PRETRAIN_HIDDEN: List[int] = [100]
DEFAULT_PRETRAIN_EPOCHS: int = 50
DEFAULT_CLASSIFIER_LR: float = 1e-3
DEFAULT_CLASSIFIER_BATCH: int = 64
# 预训练准确率不高于 “多数类比例 + 该值” 时给出告警
DEGENERATE_ACCURACY_MARGIN: float = 0.02


# --- 9. 评估配置 ---
# 下游算法集合，名称与结果表保持一致
DEFAULT_ROSTER: List[str] = [
    "DT (d=10)",
    "DT (d=20)",
    "Linear SVM",
    "MLP (100)",
    "MLP (200x2)",
    "RF (n=10, d=10)",
    "RF (n=10, d=20)",
]
PRECISION_KS: List[int] = [10, 20, 30]
L1_CS: List[float] = [0.01, 0.001]
# l1 特征选择时判定为 “非零” 的权重阈值
SELECTION_THRESHOLD: float = 1e-6
# 投影分类器的可信准确率门槛
PROJECTION_MIN_ACCURACY: float = 0.99
PROJECTION_HIDDEN: List[int] = [64, 64]
PROJECTION_EPOCHS: int = 100
# 可解释性指标 REAL 列：同一份真实数据换用的种子偏移
REAL_BASELINE_SEED_OFFSET: int = 1


# --- 10. 二维玩具实验配置 ---
TOY_CLASS_MEANS: Dict[str, List[List[float]]] = {
    "two_gaussians": [[0.35, 0.5], [0.65, 0.5]],
}
TOY_DEFAULT_NOISE: float = 0.06
GRID_RESOLUTION: int = 200
TOY_METHODS: List[str] = ["real", "acgan", "wgan", "bwgan"]
