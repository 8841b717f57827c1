# src/bcgan_toolkit/errors.py

"""统一的异常类型。每个异常都带有一个机器可读的类别，命令行据此决定退出码。"""


class BcganError(Exception):
    """所有项目内异常的基类。"""

    category: str = "unexpected"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


# --- 张量 / 自动微分 ---
class TensorError(BcganError):
    category = "tensor"


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class SecondOrderUnsupportedError(TensorError):
    pass


# --- 配置 ---
class ConfigError(BcganError):
    category = "config"


# --- 数据 ---
class DataIngestError(BcganError):
    category = "data"


class SchemaMismatchError(DataIngestError):
    pass


# --- 训练 ---
class TrainingDivergedError(BcganError):
    category = "training"


# --- 评估 ---
class ProjectionUnreliableError(BcganError):
    category = "evaluation"


EXIT_CODES: dict[str, int] = {
    "unexpected": 1,
    "config": 2,
    "data": 3,
    "tensor": 4,
    "training": 5,
    "evaluation": 6,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, BcganError):
        return EXIT_CODES.get(exc.category, 1)
    return EXIT_CODES["unexpected"]
