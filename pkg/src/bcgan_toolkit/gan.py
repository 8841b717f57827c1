# src/bcgan_toolkit/gan.py

"""
条件 GAN 训练：WGAN-GP、简化版 MMD-GAN、ACGAN，三者都可以叠加 BC-loss。

随机数流由 SeedSequence(seed).spawn 派生，彼此独立：
  init   网络与嵌入初始化
  train  批次抽样、噪声、插值系数
  bc     BC-loss 使用的真实批次
  sample sample_conditional 的默认随机源
BC-loss 只消耗 bc 流，所以 λ_bc = 0 时训练轨迹与基础 GAN 逐位一致。
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import config
from . import nn
from . import tensor_core as tc
from .data_io import ClassPrior, Dataset, FeatureSchema
from .errors import NonFiniteError, TrainingDivergedError
from .mmd import KernelConfig, PosteriorClassifier, bc_loss, mmd2_unbiased
from .tensor_core import Graph, Tensor

logger = logging.getLogger(__name__)

Variant = Literal["wgan_gp", "mmd_gan", "acgan"]
VARIANTS: Tuple[str, ...] = ("wgan_gp", "mmd_gan", "acgan")
LIPSCHITZ_MODES: Tuple[str, ...] = ("gradient_penalty", "weight_clip")
HISTORY_COLUMNS: List[str] = ["step", "critic_loss", "gen_base_loss", "bc_loss", "total"]

EMB_KEY = "emb"


@dataclass
class GanConfig:
    variant: Variant = "wgan_gp"
    lambda_bc: float = 0.0
    lambda_gp: float = config.DEFAULT_LAMBDA_GP
    n_critic: int = config.DEFAULT_N_CRITIC
    batch_size: int = config.DEFAULT_BATCH_SIZE
    epochs: int = 1
    # 每个 epoch 的生成器步数；为空时取 ⌊n / batch_size⌋ (至少 1)
    steps_per_epoch: Optional[int] = None
    noise_dim: int = config.DEFAULT_NOISE_DIM
    seed: int = 0
    lipschitz: Literal["gradient_penalty", "weight_clip"] = "gradient_penalty"
    clip_value: float = config.WEIGHT_CLIP_VALUE
    hidden: List[int] = field(default_factory=lambda: list(config.DEFAULT_GAN_HIDDEN))
    embedding_dim: int = config.DEFAULT_EMBEDDING_DIM
    mmd_feature_dim: int = config.DEFAULT_MMD_FEATURE_DIM
    learning_rate: float = config.DEFAULT_LEARNING_RATE
    beta1: float = config.DEFAULT_BETA1
    beta2: float = config.DEFAULT_BETA2
    leaky_slope: float = config.LEAKY_SLOPE
    # BC-loss 与 MMD-GAN 的核带宽；为空时每个批次用中位数启发式
    kernel_bandwidth: Optional[float] = None

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"未知的 GAN 变体: '{self.variant}'。可用: {VARIANTS}")
        if self.lipschitz not in LIPSCHITZ_MODES:
            raise ValueError(f"未知的 Lipschitz 约束方式: '{self.lipschitz}'")
        if self.lambda_bc < 0:
            raise ValueError(f"lambda_bc 必须 ≥ 0，得到 {self.lambda_bc}")
        if self.lambda_gp < 0:
            raise ValueError(f"lambda_gp 必须 ≥ 0，得到 {self.lambda_gp}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic 必须 ≥ 1，得到 {self.n_critic}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size 必须 ≥ 2，得到 {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs 必须 ≥ 0，得到 {self.epochs}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch 必须 ≥ 1，得到 {self.steps_per_epoch}")
        if self.noise_dim < 1 or self.embedding_dim < 0 or self.mmd_feature_dim < 1:
            raise ValueError("noise_dim / mmd_feature_dim 必须 ≥ 1，embedding_dim 必须 ≥ 0")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope 必须在 (0, 1) 内，得到 {self.leaky_slope}")
        if self.kernel_bandwidth is not None and not self.kernel_bandwidth > 0:
            raise ValueError(f"kernel_bandwidth 必须 > 0，得到 {self.kernel_bandwidth}")

    @property
    def kernel(self) -> KernelConfig:
        if self.kernel_bandwidth is None:
            return KernelConfig()
        return KernelConfig.fixed(self.kernel_bandwidth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        return cls(**d)


# ======================================================================
# --- GanBundle ---
# ======================================================================

def _spawn_rngs(seed: int) -> Dict[str, np.random.Generator]:
    names = ("init", "train", "bc", "sample")
    return {name: np.random.default_rng(child)
            for name, child in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


@dataclass
class GanBundle:
    """生成器 + 评论家 + 各自的类别嵌入 + 类别先验 + 训练状态。"""
    config: GanConfig
    schema: FeatureSchema
    prior: ClassPrior
    gen_spec: nn.MlpSpec
    critic_spec: nn.MlpSpec
    gen_params: nn.Params
    critic_params: nn.Params
    rngs: Dict[str, np.random.Generator]
    gen_opt: nn.AdamState
    critic_opt: nn.AdamState
    step: int = 0

    @property
    def n_classes(self) -> int:
        return self.prior.n_classes

    @property
    def n_features(self) -> int:
        return self.gen_spec.out_dim

    def gen_table(self, params) -> Tensor | np.ndarray:
        return params.get(EMB_KEY, np.zeros((self.n_classes, 0)))

    def critic_table(self, params) -> Tensor | np.ndarray:
        return params.get(EMB_KEY, np.zeros((self.n_classes, 0)))


def _critic_out_dim(cfg: GanConfig, n_classes: int) -> int:
    if cfg.variant == "acgan":
        return 1 + n_classes
    if cfg.variant == "mmd_gan":
        return cfg.mmd_feature_dim
    return 1


def init_bundle(cfg: GanConfig, schema: FeatureSchema, prior: ClassPrior) -> GanBundle:
    """
    构建网络结构并初始化参数。
    - 生成器:  [z | emb_G(y)] → hidden → d，sigmoid 输出
    - 评论家:  wgan_gp / mmd_gan 的输入为 [x | emb_D(y)]；acgan 不做条件拼接，
               输出 1 个对抗分数 + |Y| 个辅助分类 logits
    """
    if prior.n_classes != schema.n_classes:
        raise ValueError(f"先验类别数 ({prior.n_classes}) 与 schema ({schema.n_classes}) 不一致")
    rngs = _spawn_rngs(cfg.seed)
    k, d, e = schema.n_classes, schema.n_features, cfg.embedding_dim
    gen_spec = nn.MlpSpec.build(cfg.noise_dim + e, cfg.hidden, d, "sigmoid", cfg.leaky_slope)
    critic_in = d if cfg.variant == "acgan" else d + e
    critic_spec = nn.MlpSpec.build(critic_in, cfg.hidden, _critic_out_dim(cfg, k), "none", cfg.leaky_slope)

    gen_params = nn.init_mlp_params(gen_spec, rngs["init"])
    critic_params = nn.init_mlp_params(critic_spec, rngs["init"])
    if e > 0:
        gen_params[EMB_KEY] = nn.ClassEmbedding.init(k, e, rngs["init"]).table
        if cfg.variant != "acgan":
            critic_params[EMB_KEY] = nn.ClassEmbedding.init(k, e, rngs["init"]).table

    def adam() -> nn.AdamState:
        return nn.AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2)

    return GanBundle(cfg, schema, prior, gen_spec, critic_spec, gen_params, critic_params,
                     rngs, adam(), adam())


# ======================================================================
# --- 前向与采样 ---
# ======================================================================

def generator_forward(b: GanBundle, params, z, labels) -> Tensor:
    table = b.gen_table(params)
    return nn.mlp_forward(b.gen_spec, params, nn.condition_input(z, labels, table))


def critic_forward(b: GanBundle, params, x, labels) -> Tensor:
    if b.config.variant == "acgan":
        return nn.mlp_forward(b.critic_spec, params, x)
    return nn.mlp_forward(b.critic_spec, params, nn.condition_input(x, labels, b.critic_table(params)))


def _critic_score(b: GanBundle, out: Tensor) -> Tensor:
    """对抗分数列 (acgan 的第 0 列)。"""
    return tc.slice_cols(out, 0, 1) if b.config.variant == "acgan" else out


def sample_labels(prior: ClassPrior, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(prior.n_classes, size=n, p=prior.probabilities)


def sample_conditional(b: GanBundle, n: int, labels: Optional[Sequence[int]] = None,
                       seed: Optional[int] = None) -> Dataset:
    """
    y ~ P(y) (或使用给定 labels)，x = G(z, y)，z ~ N(0, I)。
    指定 seed 时使用独立的随机源，否则消耗 bundle 的 sample 流。
    """
    if n < 1:
        raise ValueError(f"样本数 n 必须 ≥ 1，得到 {n}")
    rng = np.random.default_rng(seed) if seed is not None else b.rngs["sample"]
    if labels is None:
        labels = sample_labels(b.prior, n, rng)
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels 的长度 ({labels.size}) 必须等于 n ({n})")
        if labels.min() < 0 or labels.max() >= b.n_classes:
            raise ValueError(f"标签超出范围 [0, {b.n_classes})")
    z = rng.standard_normal((n, b.config.noise_dim))
    features = generator_forward(b, b.gen_params, z, labels).values
    return Dataset(features, labels, b.schema)


# ======================================================================
# --- 损失函数 ---
# ======================================================================

def gradient_penalty(b: GanBundle, g: Graph, critic_params, x_hat: Tensor, labels) -> Tensor:
    """
    λ_gp · mean[(‖∇_x̂ D(x̂)‖₂ − 1)²]，范数取 sqrt(‖g‖² + ε) 以保证零梯度处可导。
    mmd_gan 的评论家输出是特征向量，对其沿单位方向 1/√F 的投影施加惩罚。
    """
    out = critic_forward(b, critic_params, x_hat, labels)
    score = _critic_score(b, out)
    if b.config.variant == "mmd_gan":
        score = tc.scale(tc.reduce_sum(out, axis=1, keepdims=True), 1.0 / np.sqrt(out.shape[1]))
    grad = tc.input_gradient_node(g, tc.reduce_sum(score), x_hat)
    norm = tc.sqrt(tc.add(tc.reduce_sum(tc.square(grad), axis=1), config.GRADIENT_NORM_EPS))
    return tc.scale(tc.reduce_mean(tc.square(tc.sub(norm, 1.0))), b.config.lambda_gp)


def _interpolate(g: Graph, real: np.ndarray, fake: np.ndarray, alpha: np.ndarray) -> Tensor:
    return g.leaf(alpha * real + (1.0 - alpha) * fake, name="x_hat")


def critic_objective(b: GanBundle, g: Graph, critic_params, real: np.ndarray, fake: np.ndarray,
                     labels: np.ndarray, alpha: np.ndarray) -> Tensor:
    """在图 g 上构建评论家损失 (评论家最小化该值)。"""
    cfg = b.config
    out_real = critic_forward(b, critic_params, real, labels)
    out_fake = critic_forward(b, critic_params, fake, labels)
    if cfg.variant == "mmd_gan":
        loss = tc.scale(mmd2_unbiased(out_real, out_fake, cfg.kernel), -1.0)
    else:
        loss = tc.sub(tc.reduce_mean(_critic_score(b, out_fake)), tc.reduce_mean(_critic_score(b, out_real)))
        if cfg.variant == "acgan":
            k = b.n_classes
            aux = tc.add(nn.cross_entropy(tc.slice_cols(out_real, 1, 1 + k), labels),
                         nn.cross_entropy(tc.slice_cols(out_fake, 1, 1 + k), labels))
            loss = tc.add(loss, aux)
    if cfg.lipschitz == "gradient_penalty" and cfg.lambda_gp > 0:
        x_hat = _interpolate(g, real, fake, alpha)
        loss = tc.add(loss, gradient_penalty(b, g, critic_params, x_hat, labels))
    return loss


def critic_loss_wgan(b: GanBundle, real: np.ndarray, fake: np.ndarray, labels: Sequence[int],
                     alpha: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    mean D(fake) − mean D(real) + λ_gp · GP，x̂ 为真实与生成样本的逐行均匀插值。
    返回的标量所在的图上挂有评论家参数 (名字与 critic_params 相同)。
    """
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f"真实批次 {real.shape} 与生成批次 {fake.shape} 形状不一致")
    labels = np.asarray(labels, dtype=np.int64)
    if alpha is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        alpha = rng.uniform(size=(real.shape[0], 1))
    g = Graph()
    bound = nn.bind_params(g, b.critic_params)
    return critic_objective(b, g, bound, real, fake, labels, alpha)


class GeneratorLoss(NamedTuple):
    total: Tensor
    base: Tensor
    bc: Optional[Tensor]


def generator_loss(b: GanBundle, fake: Tensor, labels: Sequence[int], real: np.ndarray,
                   classifiers: Sequence[PosteriorClassifier] = (),
                   bc_real: Optional[np.ndarray] = None) -> GeneratorLoss:
    """
    基础损失 + λ_bc · BC-loss。
    - wgan_gp: −mean D(fake)
    - mmd_gan: 评论家特征空间中的 MMD²(h(real), h(fake))
    - acgan:   −mean D(fake) + 辅助分类交叉熵
    λ_bc = 0 时直接返回基础损失本身。评论家参数作为常量参与计算。
    """
    cfg = b.config
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.lambda_bc > 0 and not classifiers:
        raise ValueError("lambda_bc > 0 时需要至少一个预训练分类器")
    out_fake = critic_forward(b, b.critic_params, fake, labels)
    if cfg.variant == "mmd_gan":
        h_real = critic_forward(b, b.critic_params, real, labels).values
        base = mmd2_unbiased(h_real, out_fake, cfg.kernel)
    else:
        base = tc.scale(tc.reduce_mean(_critic_score(b, out_fake)), -1.0)
        if cfg.variant == "acgan":
            base = tc.add(base, nn.cross_entropy(tc.slice_cols(out_fake, 1, 1 + b.n_classes), labels))
    if cfg.lambda_bc == 0:
        return GeneratorLoss(base, base, None)
    bc = bc_loss(real if bc_real is None else bc_real, fake, classifiers, cfg.kernel)
    return GeneratorLoss(tc.add(base, tc.scale(bc, cfg.lambda_bc)), base, bc)


# ======================================================================
# --- 训练循环 ---
# ======================================================================

def _batch_indices(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=size, replace=n < size)


def _clip(params: nn.Params, value: float) -> None:
    """只裁剪各层的 W / b；类别嵌入表不参与裁剪。"""
    for name in params:
        if name == EMB_KEY:
            continue
        np.clip(params[name], -value, value, out=params[name])


def _critic_step(b: GanBundle, data: Dataset) -> float:
    cfg, rng = b.config, b.rngs["train"]
    idx = _batch_indices(len(data), cfg.batch_size, rng)
    real, labels = data.features[idx], data.labels[idx]
    z = rng.standard_normal((cfg.batch_size, cfg.noise_dim))
    fake = generator_forward(b, b.gen_params, z, labels).values
    alpha = rng.uniform(size=(cfg.batch_size, 1))

    g = Graph()
    bound = nn.bind_params(g, b.critic_params)
    loss = critic_objective(b, g, bound, real, fake, labels, alpha)
    grads = tc.backward(g, loss)
    nn.adam_step(b.critic_opt, b.critic_params, nn.collect_grads(grads, bound))
    if cfg.lipschitz == "weight_clip":
        _clip(b.critic_params, cfg.clip_value)
    return loss.item()


def _generator_step(b: GanBundle, data: Dataset, classifiers) -> Tuple[float, float, float]:
    cfg, rng = b.config, b.rngs["train"]
    idx = _batch_indices(len(data), cfg.batch_size, rng)
    real, labels = data.features[idx], data.labels[idx]
    z = rng.standard_normal((cfg.batch_size, cfg.noise_dim))
    bc_real = None
    if cfg.lambda_bc > 0:
        bc_real = data.features[_batch_indices(len(data), cfg.batch_size, b.rngs["bc"])]

    g = Graph()
    bound = nn.bind_params(g, b.gen_params)
    fake = generator_forward(b, bound, z, labels)
    loss = generator_loss(b, fake, labels, real, classifiers, bc_real)
    grads = tc.backward(g, loss.total)
    nn.adam_step(b.gen_opt, b.gen_params, nn.collect_grads(grads, bound))
    bc_value = loss.bc.item() if loss.bc is not None else 0.0
    return loss.base.item(), bc_value, loss.total.item()


def steps_per_epoch(cfg: GanConfig, n: int) -> int:
    return cfg.steps_per_epoch or max(1, n // cfg.batch_size)


def train(b: GanBundle, data: Dataset, classifiers: Sequence[PosteriorClassifier] = (),
          progress: bool = True) -> Tuple[GanBundle, pd.DataFrame]:
    """
    交替训练：每个生成器步之前做 n_critic 个评论家步。返回 (bundle, 逐步损失表)。
    任一损失出现非有限值时抛出 TrainingDivergedError，附带步数与各损失分量。
    """
    cfg = b.config
    if cfg.lambda_bc > 0 and not classifiers:
        raise ValueError("lambda_bc > 0 时需要至少一个预训练分类器")
    data.schema.check_compatible(b.schema, "训练数据与 GAN")
    if data.features.min() < 0.0 or data.features.max() > 1.0:
        raise ValueError("训练特征必须已预处理到 [0, 1]")

    total_steps = cfg.epochs * steps_per_epoch(cfg, len(data))
    rows: List[dict] = []
    last = {"critic_loss": float("nan"), "gen_base_loss": float("nan"), "bc_loss": 0.0}
    bar = tqdm(range(total_steps), desc=f"训练 {cfg.variant} (λ_bc={cfg.lambda_bc:g})",
               disable=not progress, leave=False)
    for _ in bar:
        try:
            for _ in range(cfg.n_critic):
                last["critic_loss"] = _critic_step(b, data)
            base, bc, total = _generator_step(b, data, classifiers)
        except NonFiniteError as e:
            logger.error(f"❌ 训练在第 {b.step} 步发散: {e}")
            raise TrainingDivergedError(
                f"训练在第 {b.step} 步出现非有限损失", step=b.step, **last, op=e.details.get("op")
            ) from e
        last.update(gen_base_loss=base, bc_loss=bc)
        rows.append({"step": b.step, "critic_loss": last["critic_loss"],
                     "gen_base_loss": base, "bc_loss": bc, "total": total})
        b.step += 1
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    if total_steps:
        logger.info(
            f"  ✅ {cfg.variant} 训练完成：{total_steps} 个生成器步，"
            f"最终 critic={rows[-1]['critic_loss']:.4f}, G={rows[-1]['gen_base_loss']:.4f}, "
            f"bc={rows[-1]['bc_loss']:.4f}"
        )
    return b, history


# ======================================================================
# --- 检查点 ---
# ======================================================================

def save_bundle(b: GanBundle, path: Path) -> Path:
    arrays: Dict[str, np.ndarray] = {"prior": b.prior.probabilities}
    arrays.update({f"G/{k}": v for k, v in b.gen_params.items()})
    arrays.update({f"D/{k}": v for k, v in b.critic_params.items()})
    arrays.update(b.gen_opt.to_arrays("optG/"))
    arrays.update(b.critic_opt.to_arrays("optD/"))
    meta = {
        "config": b.config.to_dict(),
        "schema": b.schema.to_dict(),
        "gen_spec": b.gen_spec.to_dict(),
        "critic_spec": b.critic_spec.to_dict(),
        "adam": b.gen_opt.hyper(),
        "rng_states": {name: rng.bit_generator.state for name, rng in b.rngs.items()},
        "step": b.step,
    }
    return nn.save_checkpoint(path, arrays, meta, config.FORMAT_GAN)


def load_bundle(path: Path) -> GanBundle:
    arrays, meta = nn.load_checkpoint(path, config.FORMAT_GAN)
    cfg = GanConfig.from_dict(meta["config"])
    rngs = {}
    for name, state in meta["rng_states"].items():
        rng = np.random.default_rng()
        rng.bit_generator.state = state
        rngs[name] = rng

    def strip(prefix: str) -> nn.Params:
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    return GanBundle(
        config=cfg,
        schema=FeatureSchema.from_dict(meta["schema"]),
        prior=ClassPrior(arrays["prior"]),
        gen_spec=nn.MlpSpec.from_dict(meta["gen_spec"]),
        critic_spec=nn.MlpSpec.from_dict(meta["critic_spec"]),
        gen_params=strip("G/"),
        critic_params=strip("D/"),
        rngs=rngs,
        gen_opt=nn.AdamState.from_arrays(arrays, "optG/", meta["adam"]),
        critic_opt=nn.AdamState.from_arrays(arrays, "optD/", meta["adam"]),
        step=int(meta["step"]),
    )
