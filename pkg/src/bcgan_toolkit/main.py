# src/bcgan_toolkit/main.py

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import config
from .errors import EXIT_CODES, BcganError, exit_code_for

# --- 设置基础日志 ---
logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)
logger = logging.getLogger("BcganToolkit")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help="实验配置 YAML 文件 (缺省时全部使用默认值)。")
    parser.add_argument('--seed', type=int, help="全局随机种子，覆盖配置文件中的 seed。")
    parser.add_argument('--out', help="输出目录，覆盖配置文件中的 output_dir。")
    parser.add_argument('--variant', choices=["wgan_gp", "acgan", "mmd_gan"], help="GAN 变体。")
    parser.add_argument('--lambda-bc', dest="lambda_bc", type=float,
                        help="BC-loss 权重，0 表示关闭边界校准。")
    parser.add_argument('--no-progress', action='store_true', help="关闭进度条。")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="BCGAN Toolkit: 训练带边界校准的条件 GAN 并评估合成数据的模型兼容性。",
        formatter_class=argparse.RawTextHelpFormatter
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="在训练集的随机一半上训练 k 个 MLP 分类器。")
    _add_common(p)

    p = sub.add_parser("train-gan", help="训练 GAN (λ_bc > 0 时需要先运行 pretrain)。")
    _add_common(p)
    p.add_argument('--classifiers', help="预训练分类器清单 manifest.json 的路径。")

    p = sub.add_parser("generate", help="从 GAN 检查点采样合成数据集。")
    _add_common(p)
    p.add_argument('--checkpoint', help="GAN 检查点 (.npz)。")
    p.add_argument('--n', type=int, help="生成的行数 (缺省为训练集大小)。")

    p = sub.add_parser("evaluate", help="在真实 / 合成数据上训练下游算法并比较测试准确率。")
    _add_common(p)
    p.add_argument('--synthetic', help="合成数据 CSV (需要同目录下的 schema 旁车文件)。")
    p.add_argument('--real', help="导出的真实训练数据 CSV (缺省按配置加载)。")
    p.add_argument('--test', help="导出的测试数据 CSV (缺省按配置加载)。")
    p.add_argument('--roster', nargs='+', help="只评估这些算法 (名称与结果表一致)。")

    p = sub.add_parser("toy-demo", help="二维玩具实验：样本点、随机森林决策栅格与汇总表。")
    _add_common(p)
    return parser


def _error_line(exc: BaseException) -> str:
    category = exc.category if isinstance(exc, BcganError) else (
        "config" if isinstance(exc, ValueError) else "unexpected")
    return json.dumps({"error": category, "message": str(exc)}, ensure_ascii=False)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ValueError):
        return EXIT_CODES["config"]
    return exit_code_for(exc)


def run(args: argparse.Namespace) -> None:
    from . import pipeline
    from .experiment import apply_overrides, load_config

    cfg = apply_overrides(load_config(args.config), seed=args.seed, out=args.out,
                          variant=args.variant, lambda_bc=args.lambda_bc)
    progress = not args.no_progress
    if args.command == "pretrain":
        pipeline.cmd_pretrain(cfg)
    elif args.command == "train-gan":
        pipeline.cmd_train_gan(cfg, args.classifiers, progress=progress)
    elif args.command == "generate":
        pipeline.cmd_generate(cfg, args.checkpoint, args.n)
    elif args.command == "evaluate":
        pipeline.cmd_evaluate(cfg, args.synthetic, args.real, args.test, args.roster)
    elif args.command == "toy-demo":
        pipeline.cmd_toy_demo(cfg, progress=progress)


def main(argv: Optional[List[str]] = None) -> int:
    """
    主函数，解析命令行参数并执行对应子命令。
    返回进程退出码：0 成功，其余见 errors.EXIT_CODES。
    """
    args = build_parser().parse_args(argv)

    logger.info("=" * 60)
    logger.info(f"====== 开始执行 BCGAN Toolkit: {args.command} ======")
    logger.info("=" * 60)
    try:
        run(args)
    except Exception as e:
        if isinstance(e, (BcganError, ValueError)):
            logger.error(f"❌ {args.command} 失败: {e}")
        else:
            logger.error(f"❌ {args.command} 发生未预期的错误: {e}", exc_info=True)
        print(_error_line(e), file=sys.stderr)
        return _exit_code(e)

    logger.info("=" * 60)
    logger.info(f"====== {args.command} 执行完毕 ======")
    logger.info("=" * 60)
    return 0


if __name__ == "__main__":
    sys.exit(main())
