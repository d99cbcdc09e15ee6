"""The teacher language model.

The teacher is the decoder-only LM that the speech model later reuses as its
frozen base. It is trained once, from a fixed seed, on a mixture of the
world's sentences and prompt/continuation pairs rendered with every LM
template, so that it follows the continuation rules of :mod:`.world`.
Emotion is conditioned through the emotion control tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .. import numerics as N
from ..model.config import ModelConfig
from ..model.network import EmoAlignModel
from .templates import Layout, get_template
from .vocab import BOS, EMOTIONS, EOS, EmotionLabel
from .world import World

# example kinds and their share of each teacher batch
MIXTURE = (
    ("sentence", 0.30),
    ("continuation", 0.20),
    ("emotion_continuation", 0.20),
    ("emotion_training", 0.12),
    ("ser", 0.12),
    ("cascaded_response", 0.06),
)


@dataclass
class TeacherTrainConfig:
    steps: int = 2500
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.01
    clip: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class TeacherLM:
    """Greedy/sampled generation and soft targets from the teacher LM.

    With ``emotion_conditioning=False`` every emotion control token in a
    prompt is replaced by the neutral one, which removes the mechanism.
    """

    def __init__(self, model: EmoAlignModel, world: World, emotion_conditioning: bool = True):
        self.model = model
        self.world = world
        self.vocab = world.vocab
        self.emotion_conditioning = emotion_conditioning

    def without_emotion(self) -> "TeacherLM":
        return TeacherLM(self.model, self.world, emotion_conditioning=False)

    def astype(self, dtype: str) -> "TeacherLM":
        """A copy of the teacher computing in ``dtype``."""
        cfg = replace(self.model.cfg, dtype=dtype)
        model = EmoAlignModel(cfg, components=())
        for name, t in self.model.store.items():
            model.store.add(name, t.data.astype(dtype), trainable=False)
        return TeacherLM(model, self.world, self.emotion_conditioning)

    def prompt(self, template_id: str, x, e: EmotionLabel | None = None,
               continuation=None, tag: EmotionLabel | None = None) -> Layout:
        t = get_template(template_id)
        if not self.emotion_conditioning:
            e = EmotionLabel.NEUTRAL if e is not None else None
            tag = None
        return t.layout(self.vocab, transcript=x, emotion=e if "emotion" in t.slots else None,
                        continuation=continuation, tag=tag)

    def generate(self, template_id: str, x, e: EmotionLabel | None = None, *, max_new: int = 32,
                 mode: str = "greedy", seed=None, tag: EmotionLabel | None = None) -> list[int]:
        return self.model.generate(self.prompt(template_id, x, e, tag=tag), max_new=max_new,
                                   mode=mode, seed=seed)

    def sample_transcript(self, rng: np.random.Generator, max_len: int = 32) -> list[int]:
        """One draw from the unconditional distribution (words only, until end-of-sequence)."""
        allowed = np.concatenate([[EOS], self.vocab.word_ids])
        lay = Layout(np.array([BOS]), np.array([False]), 1)
        out = self.model.generate(lay, max_new=max_len, mode="sampled",
                                  seed=int(rng.integers(2**63)), allowed=allowed)
        return [t for t in out if t != EOS]

    def distributions(self, layouts) -> tuple[np.ndarray, np.ndarray]:
        """Teacher next-token probabilities [B, N, V] and the continuation mask [B, N]."""
        with N.no_grad():
            logp, asm, _, _ = self.model.forward_layouts(layouts)
        return np.exp(logp.data), asm.loss_mask


def _example(world: World, kind: str, rng: np.random.Generator) -> Layout:
    vocab = world.vocab
    x = world.sample_sentence(rng)
    if kind == "sentence":
        ids = [BOS] + x + [EOS]
        return Layout(np.asarray(ids), np.zeros(len(ids), dtype=bool), 1)
    e = EMOTIONS[int(rng.integers(len(EMOTIONS)))]
    t = get_template(kind)
    if kind == "continuation":
        # an emotion tag after the transcript never changes a plain continuation
        tag = e if rng.random() < 0.5 else None
        return t.layout(vocab, transcript=x, tag=tag, continuation=world.continuation(x))
    if kind in ("emotion_continuation", "cascaded_response"):
        return t.layout(vocab, transcript=x, emotion=e, continuation=world.emotion_continuation(x, e))
    tagged = rng.random() < 0.8
    tag = e if tagged else None
    e_eff = e if tagged else EmotionLabel.NEUTRAL
    if kind == "emotion_training":
        return t.layout(vocab, transcript=x, tag=tag, continuation=world.emotion_continuation(x, e_eff))
    if kind == "ser":
        return t.layout(vocab, transcript=x, tag=tag, continuation=[vocab.emotion_id(e_eff), EOS])
    raise ValueError(kind)


def teacher_batch(world: World, rng: np.random.Generator, n: int) -> list[Layout]:
    kinds = [k for k, _ in MIXTURE]
    p = np.array([w for _, w in MIXTURE])
    picks = rng.choice(len(kinds), size=n, p=p / p.sum())
    return [_example(world, kinds[i], rng) for i in picks]


def build_teacher(world: World, model_cfg: ModelConfig, train: TeacherTrainConfig | None = None,
                  log=None) -> TeacherLM:
    """Train the LM base on the world's rule mixture. Deterministic given the seeds."""
    train = train or TeacherTrainConfig()
    if model_cfg.vocab_size != world.vocab.size:
        raise ValueError("model and world vocabulary sizes differ")
    model = EmoAlignModel(model_cfg, seed=train.seed, components=("lm",))
    store = model.store
    store.set_trainable(lambda name: True)
    opt = N.OptimizerState(N.AdamWConfig(lr=train.lr, weight_decay=train.weight_decay))
    rng = np.random.default_rng([train.seed, world.cfg.seed, 202])
    for step in range(train.steps):
        layouts = teacher_batch(world, rng, train.batch_size)
        store.zero_grad()
        logp, asm, _, _ = model.forward_layouts(layouts)
        loss = N.cross_entropy(logp, asm.targets, asm.loss_mask)
        loss.backward()
        N.clip_grad_norm(store, train.clip)
        N.adamw_step(store, opt, lr=N.lr_schedule(step, train.steps, train.lr, train.warmup))
        if log is not None and (step % 100 == 0 or step == train.steps - 1):
            log(step, float(loss.data))
    store.set_trainable(lambda name: False)
    return TeacherLM(model, world)
