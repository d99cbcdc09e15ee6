"""Alignment objectives and the two-stage training driver."""

from .config import (
    STAGE2_MODES,
    FreezeSpec,
    ModeError,
    StageConfig,
    TrainMode,
    requires_init,
    stage1_defaults,
    stage2_defaults,
    trainable_params,
)
from .losses import (
    continuation_loss,
    emotion_continuation_loss,
    semantic_loss,
    ser_loss,
    ser_prompt_targets,
    speech_forward,
    speech_layout,
    teacher_targets,
)
from .train import LossReport, build_student, heldout_kl, jsonl_logger, train_stage1, train_stage2

__all__ = [name for name in dir() if not name.startswith("_")]
