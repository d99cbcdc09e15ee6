"""Emotion labels and the synthetic token vocabulary.

Layout of the id space::

    0                end-of-sequence
    1                beginning-of-sequence
    2 .. 2+S-1       one token per literal prompt segment (S segments)
    next 5           emotion tokens, canonical order
    remainder        synthetic words ``w00``, ``w01``, ...
"""

from __future__ import annotations

import enum
from typing import Iterable, Sequence

import numpy as np


class EmotionLabel(enum.Enum):
    NEUTRAL = "neutral"
    HAPPY = "happy"
    SAD = "sad"
    ANGRY = "angry"
    SURPRISE = "surprise"

    @property
    def index(self) -> int:
        return _EMOTION_INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "EmotionLabel":
        return EMOTIONS[i]

    @classmethod
    def parse(cls, value: "str | EmotionLabel") -> "EmotionLabel":
        if isinstance(value, EmotionLabel):
            return value
        return cls(value.strip().lower())


EMOTIONS: tuple[EmotionLabel, ...] = tuple(EmotionLabel)
_EMOTION_INDEX = {e: i for i, e in enumerate(EMOTIONS)}
NUM_EMOTIONS = len(EMOTIONS)

EOS = 0
BOS = 1


class Vocabulary:
    def __init__(self, size: int, segments: Sequence[str]):
        self.segments = list(dict.fromkeys(segments))
        self.segment_base = 2
        self.emotion_base = self.segment_base + len(self.segments)
        self.word_base = self.emotion_base + NUM_EMOTIONS
        if size - self.word_base < 8:
            raise ValueError(f"vocabulary of {size} leaves fewer than 8 word tokens")
        self.size = size
        self.n_words = size - self.word_base
        self._segment_ids = {s: self.segment_base + i for i, s in enumerate(self.segments)}
        self._strings = ["<eos>", "<bos>"] + [f"<seg{i}>" for i in range(len(self.segments))]
        self._strings += [e.value for e in EMOTIONS]
        self._strings += [f"w{i:02d}" for i in range(self.n_words)]
        self._lookup = {s: i for i, s in enumerate(self._strings)}

    def __len__(self) -> int:
        return self.size

    # ids ---------------------------------------------------------------
    def segment_id(self, text: str) -> int:
        return self._segment_ids[text]

    def emotion_id(self, e: EmotionLabel) -> int:
        return self.emotion_base + e.index

    def word_id(self, i: int) -> int:
        if not 0 <= i < self.n_words:
            raise IndexError(i)
        return self.word_base + i

    @property
    def word_ids(self) -> np.ndarray:
        return np.arange(self.word_base, self.size)

    @property
    def emotion_ids(self) -> np.ndarray:
        return np.arange(self.emotion_base, self.emotion_base + NUM_EMOTIONS)

    def is_word(self, tok: int) -> bool:
        return self.word_base <= tok < self.size

    def emotion_of(self, tok: int) -> EmotionLabel | None:
        if self.emotion_base <= tok < self.word_base:
            return EMOTIONS[tok - self.emotion_base]
        return None

    # strings ------------------------------------------------------------
    def token_str(self, tok: int) -> str:
        return self._strings[tok]

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> str:
        out = []
        for t in ids:
            t = int(t)
            if t == EOS and stop_at_eos:
                break
            out.append(self._strings[t])
        return " ".join(out)

    def encode(self, text: str) -> list[int]:
        return [self._lookup[w] for w in text.split()]
