from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    ForwardMode,
    NonFiniteError,
    ParameterSet,
    UNetConfig,
    backward,
    count_params,
    forward,
    forward_backward,
    forward_repeated,
    init_params,
    update_running_stats,
)

__all__ = [
    "CheckpointError",
    "ForwardMode",
    "NonFiniteError",
    "ParameterSet",
    "UNetConfig",
    "backward",
    "count_params",
    "forward",
    "forward_backward",
    "forward_repeated",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "update_running_stats",
]
