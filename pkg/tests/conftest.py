import numpy as np
import pytest

from emo_align.datagen.teacher import TeacherTrainConfig, build_teacher
from emo_align.datagen.world import SyntheticWorldConfig, World
from emo_align.model import AdapterConfig, ModelConfig, PLoRAConfig

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


def small_model_config(**overrides) -> ModelConfig:
    """Vocabulary 64 (the world's layout needs it), everything else tiny."""
    base = dict(d_enc=16, enc_heads=2, enc_layers=1, enc_conv_layers=1, d_lm=16, lm_heads=2, lm_layers=1,
                mlp_mult=2, adapter=AdapterConfig(bottleneck_dim=8, output_dim=16),
                lora=PLoRAConfig(rank=2, alpha=2.0))
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def world():
    return World.build(SyntheticWorldConfig())


@pytest.fixture(scope="session")
def small_teacher(world):
    """A briefly trained teacher: enough structure for plumbing tests, not for accuracy claims."""
    return build_teacher(world, small_model_config(), TeacherTrainConfig(steps=60, batch_size=16, warmup=5))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
