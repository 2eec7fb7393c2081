from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .config import RunConfig, load_config, preset_config
from .evaluate import evaluate, recover
from .training import train_cfc, train_dac

__all__ = [
    "Checkpoint", "CheckpointError", "RunConfig", "evaluate", "load_checkpoint",
    "load_config", "preset_config", "recover", "train_cfc", "train_dac",
]
