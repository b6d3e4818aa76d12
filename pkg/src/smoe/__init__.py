"""Top-1 routed mixture-of-experts CTC acoustic modeling at desk scale."""

from .errors import (ConfigError, ContractError, DimensionError, FormatError,
                     NumericError, SmoeError)
from .layers import RouterRecord
from .losses import LossBreakdown, LossWeights
from .model import (AcousticModel, CostReport, ModelConfig, PRESETS, build,
                    count_flops, count_params, load_checkpoint,
                    preset_config, save_checkpoint)
from .tensor import Tensor, grad_check
from .trainer import (EvalReport, RouteStats, TrainConfig, TrainResult,
                      evaluate, train)

__version__ = "0.1.0"

__all__ = [
    "AcousticModel", "ConfigError", "ContractError", "CostReport",
    "DimensionError", "EvalReport", "FormatError", "LossBreakdown",
    "LossWeights", "ModelConfig", "NumericError", "PRESETS", "RouteStats",
    "RouterRecord", "SmoeError", "Tensor", "TrainConfig", "TrainResult",
    "build", "count_flops", "count_params", "evaluate", "grad_check",
    "load_checkpoint", "preset_config", "save_checkpoint", "train",
    "__version__",
]
