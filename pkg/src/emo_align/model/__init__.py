"""Speech encoder, convolutional adapter, Partial-LoRA language model and SER head."""

from .checkpoint import Checkpoint, CheckpointError, model_from_checkpoint, model_to_checkpoint
from .config import AdapterConfig, ModelConfig, PLoRAConfig, tiny_config
from .network import Assembled, EmoAlignModel

__all__ = ["AdapterConfig", "Assembled", "Checkpoint", "CheckpointError", "model_from_checkpoint",
           "model_to_checkpoint", "EmoAlignModel", "ModelConfig", "PLoRAConfig", "tiny_config"]
