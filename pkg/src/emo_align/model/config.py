from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

LORA_TARGETS = ("query", "key", "value", "output")
_TARGET_TO_PROJ = {"query": "q", "key": "k", "value": "v", "output": "o"}


@dataclass
class AdapterConfig:
    """Convolutional subsampler followed by a residual bottleneck.

    Full-scale setting is three stride-2 layers (kernel 5, padding 2) and a
    512-wide bottleneck; the desk-scale bottleneck is 512 scaled by the same
    factor as the LM width.
    """

    n_conv_layers: int = 3
    kernel: int = 5
    stride: int = 2
    padding: int = 2
    bottleneck_dim: int = 64
    output_dim: int = 128

    def out_length(self, L: int) -> int:
        for _ in range(self.n_conv_layers):
            L = (L + 2 * self.padding - self.kernel) // self.stride + 1
        return L


@dataclass
class PLoRAConfig:
    rank: int = 16
    alpha: float = 16.0
    targets: tuple[str, ...] = LORA_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.targets = tuple(self.targets)
        bad = set(self.targets) - set(LORA_TARGETS)
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def projections(self) -> tuple[str, ...]:
        return tuple(_TARGET_TO_PROJ[t] for t in self.targets)


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_audio: int = 16
    d_enc: int = 64
    enc_heads: int = 4
    enc_layers: int = 2
    enc_conv_layers: int = 2
    enc_conv_kernel: int = 3
    d_lm: int = 128
    lm_heads: int = 4
    lm_layers: int = 4
    mlp_mult: int = 4
    max_positions: int = 128
    n_emotions: int = 5
    dtype: str = "float64"
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lora: PLoRAConfig = field(default_factory=PLoRAConfig)

    def __post_init__(self):
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)
        if isinstance(self.lora, dict):
            self.lora = PLoRAConfig(**self.lora)
        if self.adapter.output_dim != self.d_lm:
            raise ValueError("adapter output_dim must equal the LM width")
        if self.d_lm % self.lm_heads or self.d_enc % self.enc_heads:
            raise ValueError("model width must divide evenly into heads")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"]["targets"] = list(d["lora"]["targets"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """A very small model for unit tests and gradient checks."""
    base = dict(
        vocab_size=32, d_audio=4, d_enc=8, enc_heads=2, enc_layers=1, enc_conv_layers=1,
        d_lm=8, lm_heads=2, lm_layers=1, mlp_mult=2, max_positions=64,
        adapter=AdapterConfig(bottleneck_dim=4, output_dim=8),
        lora=PLoRAConfig(rank=2, alpha=2.0),
    )
    base.update(overrides)
    return ModelConfig(**base)
