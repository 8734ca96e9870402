from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .lpt import (
    GROUPS,
    LPT,
    DimensionMismatch,
    InvalidLabel,
    ModelConfig,
    ModelError,
    PrefixTooLong,
    PropertySpec,
    group_of,
    is_decayed,
    full_scale_preset,
)

__all__ = [
    "GROUPS", "LPT", "CheckpointError", "DimensionMismatch", "InvalidLabel", "ModelConfig",
    "ModelError", "PrefixTooLong", "PropertySpec", "group_of", "is_decayed", "load_checkpoint",
    "full_scale_preset", "save_checkpoint",
]
