"""Two-level part/whole transformer backbone with a from-scratch
reverse-mode tensor core, training harness and attention-map export."""

from .tensor import (Tensor, DimensionError, GraphError, NumericError,
                     constant, parameter)
from .encoder import AffinityTensor, PartState, WholeState
from .network import Model, VariantSpec, PRESETS, build, forward, preset
from .cost import CostReport, cost_report, count_flops, count_params
from .train import TrainConfig, evaluate, load_config, train

__all__ = [
    "Tensor", "DimensionError", "GraphError", "NumericError", "constant",
    "parameter", "AffinityTensor", "PartState", "WholeState", "Model",
    "VariantSpec", "PRESETS", "build", "forward", "preset", "CostReport",
    "cost_report", "count_flops", "count_params", "TrainConfig", "evaluate",
    "load_config", "train",
]

__version__ = "0.1.0"
