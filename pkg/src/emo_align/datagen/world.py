"""The synthetic world: a word-level Markov language, continuation rules and speech rendering.

Words are vocabulary tokens. Each word has four possible successors with
fixed probabilities; its most likely successor is ``succ(w)``. A plain
continuation of a transcript ``x`` is ``[sigma(x[0]), succ(x[-1]),
succ(succ(x[-1]))]`` where ``sigma`` is a fixed word permutation. An
emotion-aware continuation prefixes the emotion token for every emotion
except neutral.

Speech renders each token as ``F`` frames::

    frame = audio_emb[token] + rho * emo_offset[emotion] + noise(sigma)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .templates import build_vocabulary
from .vocab import EMOTIONS, EOS, EmotionLabel, Vocabulary

MIN_WORDS = 5
SUCCESSOR_PROBS = (0.4, 0.3, 0.2, 0.1)


@dataclass
class SyntheticWorldConfig:
    vocab_size: int = 64
    seed: int = 0
    frames_per_token: int = 4
    d_audio: int = 16
    noise: float = 0.05
    emotion_scale: float = 0.5
    n_asr: int = 2000
    n_ser: int = 2000
    n_test: int = 200
    min_len: int = MIN_WORDS
    max_len: int = 12
    one_hot_audio: bool = False

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be >= 8")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.emotion_scale < 0:
            raise ValueError("emotion_scale must be >= 0")
        if self.min_len < MIN_WORDS or self.max_len < self.min_len:
            raise ValueError(f"transcript lengths must satisfy {MIN_WORDS} <= min_len <= max_len")
        if self.one_hot_audio and self.d_audio != self.vocab_size:
            raise ValueError("one-hot audio requires d_audio == vocab_size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorldConfig":
        return cls(**d)


def lossless_world(**overrides) -> SyntheticWorldConfig:
    """Noise-free, emotion-free world with one-hot audio embeddings."""
    base = dict(frames_per_token=8, d_audio=64, noise=0.0, emotion_scale=0.0, one_hot_audio=True)
    base.update(overrides)
    return SyntheticWorldConfig(**base)


@dataclass
class World:
    """Materialised rules of a :class:`SyntheticWorldConfig`."""

    cfg: SyntheticWorldConfig
    vocab: Vocabulary
    successors: np.ndarray      # [n_words, 4] word indices
    sigma: np.ndarray           # [n_words] permutation of word indices
    audio_emb: np.ndarray       # [V, d_audio]
    emo_offset: np.ndarray      # [5, d_audio]
    succ_probs: np.ndarray = field(default_factory=lambda: np.array(SUCCESSOR_PROBS))

    @classmethod
    def build(cls, cfg: SyntheticWorldConfig) -> "World":
        vocab = build_vocabulary(cfg.vocab_size)
        rng = np.random.default_rng([cfg.seed, 101])
        W = vocab.n_words
        succ = np.empty((W, len(SUCCESSOR_PROBS)), dtype=np.int64)
        for i in range(W):
            others = np.delete(np.arange(W), i)
            succ[i] = rng.choice(others, size=len(SUCCESSOR_PROBS), replace=False)
        sigma = rng.permutation(W)
        if cfg.one_hot_audio:
            audio = np.eye(cfg.vocab_size)
        else:
            audio = rng.normal(size=(cfg.vocab_size, cfg.d_audio))
        emo = rng.normal(size=(len(EMOTIONS), cfg.d_audio))
        return cls(cfg, vocab, succ, sigma, audio, emo)

    # -- language ---------------------------------------------------------------
    def _w(self, tok: int) -> int:
        return int(tok) - self.vocab.word_base

    def _t(self, w: int) -> int:
        return int(w) + self.vocab.word_base

    def succ(self, tok: int) -> int:
        return self._t(self.successors[self._w(tok)][0])

    def sample_sentence(self, rng: np.random.Generator, length: int | None = None) -> list[int]:
        if length is None:
            length = int(rng.integers(self.cfg.min_len, self.cfg.max_len + 1))
        w = int(rng.integers(self.vocab.n_words))
        out = [w]
        for _ in range(length - 1):
            w = int(self.successors[w][rng.choice(len(self.succ_probs), p=self.succ_probs)])
            out.append(w)
        return [self._t(w) for w in out]

    def next_word_distribution(self, tok: int | None) -> np.ndarray:
        """Distribution over word indices following ``tok`` (uniform at the start)."""
        W = self.vocab.n_words
        if tok is None:
            return np.full(W, 1.0 / W)
        p = np.zeros(W)
        p[self.successors[self._w(tok)]] = self.succ_probs
        return p

    def continuation(self, x) -> list[int]:
        """Plain continuation of transcript ``x``, terminated by end-of-sequence."""
        a = self._t(self.sigma[self._w(x[0])])
        b = self.succ(x[-1])
        return [a, b, self.succ(b), EOS]

    def emotion_continuation(self, x, e: EmotionLabel) -> list[int]:
        body = self.continuation(x)
        if e is EmotionLabel.NEUTRAL:
            return body
        return [self.vocab.emotion_id(e)] + body

    # -- acoustics --------------------------------------------------------------
    def render_speech(self, x, e: EmotionLabel, seed) -> np.ndarray:
        """Frames [F * len(x), d_audio] as float32."""
        if len(x) == 0:
            raise ValueError("cannot render an empty transcript")
        F = self.cfg.frames_per_token
        base = np.repeat(self.audio_emb[np.asarray(x, dtype=np.int64)], F, axis=0)
        frames = base + self.cfg.emotion_scale * self.emo_offset[e.index]
        if self.cfg.noise > 0:
            rng = np.random.default_rng(seed)
            frames = frames + rng.normal(0.0, self.cfg.noise, size=frames.shape)
        return frames.astype(np.float32)


def linear_probe_accuracy(world: World, n_train: int = 1000, n_test: int = 500, seed: int = 0) -> float:
    """Emotion recovery from mean-pooled frames by a least-squares linear probe.

    Each transcript contributes a content component to the pooled frame, so
    the probe is fitted on one set of renderings and scored on fresh ones.
    """
    rng = np.random.default_rng([seed, 7])

    def batch(n):
        feats, labels = [], []
        for i in range(n):
            e = EMOTIONS[i % len(EMOTIONS)]
            x = world.sample_sentence(rng)
            f = world.render_speech(x, e, seed=[seed, n, i])
            feats.append(np.concatenate([f.mean(axis=0), [1.0]]))
            labels.append(e.index)
        return np.asarray(feats), np.asarray(labels)

    Xtr, ytr = batch(n_train)
    Xte, yte = batch(n_test)
    Y = np.eye(len(EMOTIONS))[ytr]
    W, *_ = np.linalg.lstsq(Xtr, Y, rcond=None)
    return float(np.mean(np.argmax(Xte @ W, axis=1) == yte))
