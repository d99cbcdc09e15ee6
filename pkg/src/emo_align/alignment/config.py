"""Training modes, freeze rules and stage configuration."""

from __future__ import annotations

import enum
import fnmatch
from dataclasses import asdict, dataclass
from typing import Callable


class TrainMode(str, enum.Enum):
    BLSP_EMO = "blsp_emo"
    BLSP_SER = "blsp_ser"
    BLSP_MULTITASK = "blsp_multitask"
    EMO_NO_PRETRAIN = "emo_no_pretrain"
    STAGE1_ONLY = "stage1_only"


STAGE2_MODES = (TrainMode.BLSP_EMO, TrainMode.BLSP_SER, TrainMode.BLSP_MULTITASK, TrainMode.EMO_NO_PRETRAIN)


class ModeError(ValueError):
    """Inconsistent stage/mode combination or missing initialization."""


@dataclass(frozen=True)
class FreezeSpec:
    """Glob patterns naming the trainable parameters; everything else is frozen."""

    patterns: tuple[str, ...]

    def __call__(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.patterns)

    @property
    def predicate(self) -> Callable[[str], bool]:
        return self


def trainable_params(stage: int, mode: TrainMode | str) -> FreezeSpec:
    """Stage 1 trains the adapter alone. Stage 2 trains encoder, adapter,
    SER head and the LM's LoRA weights; the LM base stays frozen.

    Modes whose objective never touches the SER head (``blsp_ser``,
    ``blsp_multitask``) leave it frozen.
    """
    mode = TrainMode(mode)
    if stage == 1:
        if mode is not TrainMode.STAGE1_ONLY:
            raise ModeError(f"stage 1 only supports mode stage1_only, got {mode.value}")
        return FreezeSpec(("adapter.*",))
    if stage == 2:
        if mode is TrainMode.STAGE1_ONLY:
            raise ModeError("mode stage1_only has no stage 2")
        pats = ["adapter.*", "encoder.*", "lm.*.lora.*"]
        if mode in (TrainMode.BLSP_EMO, TrainMode.EMO_NO_PRETRAIN):
            pats.append("ser_head.*")
        return FreezeSpec(tuple(pats))
    raise ModeError(f"unknown stage {stage!r}")


def requires_init(mode: TrainMode | str) -> bool:
    return TrainMode(mode) in (TrainMode.BLSP_EMO, TrainMode.BLSP_SER, TrainMode.BLSP_MULTITASK)


@dataclass
class StageConfig:
    """Schedule and objective weights for one training stage.

    Defaults are the desk-scale schedule; the full-scale setting is one epoch
    at batch 768 for stage 1 and three epochs at batch 128 for stage 2.
    ``max_steps`` caps the number of optimizer steps (0 leaves the model at
    its initialization).
    """

    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    lambda_cont: float = 1.0
    lambda_ser: float = 1.0
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lambda_cont < 0 or self.lambda_ser < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(**d)


def stage1_defaults(**overrides) -> StageConfig:
    base = dict(epochs=3, batch_size=32, lr=6e-3)
    base.update(overrides)
    return StageConfig(**base)


def stage2_defaults(**overrides) -> StageConfig:
    base = dict(epochs=5, batch_size=32)
    base.update(overrides)
    return StageConfig(**base)
