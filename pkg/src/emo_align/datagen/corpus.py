"""ASR/SER corpora, continuation construction and corpus files.

A corpus is stored as two files sharing a stem: ``<stem>.jsonl`` with one
record per sample and ``<stem>.speech`` holding the frames::

    8 bytes   magic "EMOSPCH1"
    u32       record count, u32 frame dim
    count x   (u64 byte offset of the record's frames, u32 frame count)
    frames    little-endian float32, row-major
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .teacher import TeacherLM
from .vocab import EMOTIONS, EOS, EmotionLabel
from .world import MIN_WORDS, World

SPEECH_MAGIC = b"EMOSPCH1"
MAX_NEW = 32
MAX_ATTEMPTS = 5
_KIND_CODE = {"asr": 1, "ser": 2}
_SPLIT_CODE = {"train": 1, "test": 2, "probe": 3}


class ConstructionError(RuntimeError):
    """The teacher produced no usable continuation."""


@dataclass
class Sample:
    """One corpus entry.

    ``kind`` is ``asr`` (emotion always neutral in the rendering) or ``ser``.
    ``continuation`` is set once a teacher continuation has been constructed.
    """

    id: str
    kind: str
    tokens: list[int]
    frames: np.ndarray
    emotion: EmotionLabel | None = None
    continuation: list[int] | None = None

    @property
    def rendered_emotion(self) -> EmotionLabel:
        return self.emotion if self.emotion is not None else EmotionLabel.NEUTRAL


def filter_short(x: Sequence[int]) -> bool:
    """True when the transcript has at least five words."""
    return len(x) >= MIN_WORDS


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("EMO_ALIGN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    workers = num_workers() if workers is None else workers
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sample_seed(world: World, kind: str, split: str, i: int) -> list[int]:
    return [world.cfg.seed, _KIND_CODE[kind], _SPLIT_CODE[split], i]


def draw_transcript(teacher: TeacherLM, rng: np.random.Generator, max_tries: int = 100) -> list[int]:
    cfg = teacher.world.cfg
    for _ in range(max_tries):
        x = teacher.sample_transcript(rng, max_len=cfg.max_len + 1)
        if filter_short(x) and cfg.min_len <= len(x) <= cfg.max_len:
            return x
    raise ConstructionError("teacher failed to produce a transcript in the allowed length range")


def gen_corpus(kind: str, world: World, teacher: TeacherLM, n: int, split: str = "train",
               workers: int | None = None) -> list[Sample]:
    """Transcripts sampled from the teacher, rendered to speech.

    SER corpora cycle through the labels in canonical order, so ``n``
    divisible by five gives exact balance. Each sample draws from its own
    seeded generator; results do not depend on the worker count.
    """
    if kind not in _KIND_CODE:
        raise ValueError(f"unknown corpus kind {kind!r}")

    def one(i: int) -> Sample:
        seed = sample_seed(world, kind, split, i)
        rng = np.random.default_rng(seed)
        x = draw_transcript(teacher, rng)
        e = EMOTIONS[i % len(EMOTIONS)] if kind == "ser" else None
        frames = world.render_speech(x, e or EmotionLabel.NEUTRAL, seed=seed + [0])
        return Sample(f"{kind}-{split}-{i:05d}", kind, x, frames, e)

    return _parallel_map(one, range(n), workers)


def finish_continuation(out: list[int]) -> list[int]:
    if EOS in out:
        out = out[: out.index(EOS) + 1]
    else:
        out = out[: MAX_NEW - 1] + [EOS]
    return out


def _continue(teacher: TeacherLM, sample: Sample, template_id: str, e, seed) -> list[int]:
    y = finish_continuation(teacher.generate(template_id, sample.tokens, e, max_new=MAX_NEW))
    attempt = 0
    while len(y) < 2:
        attempt += 1
        if attempt > MAX_ATTEMPTS:
            raise ConstructionError(f"{sample.id}: teacher ended immediately {MAX_ATTEMPTS} times")
        y = finish_continuation(teacher.generate(template_id, sample.tokens, e, max_new=MAX_NEW,
                                                 mode="sampled", seed=list(seed) + [attempt]))
    return y


def construct_continuation(sample: Sample, teacher: TeacherLM) -> Sample:
    """Attach the teacher's greedy continuation of the transcript."""
    if not filter_short(sample.tokens):
        raise ValueError(f"{sample.id}: transcript too short")
    y = _continue(teacher, sample, "continuation", None, [hash_id(sample.id)])
    return replace(sample, continuation=y)


def construct_emotion_continuation(sample: Sample, teacher: TeacherLM) -> Sample:
    """Attach the teacher's greedy continuation conditioned on the sample's emotion."""
    if sample.emotion is None:
        raise ValueError(f"{sample.id}: emotion-aware continuation needs an emotion label")
    if not filter_short(sample.tokens):
        raise ValueError(f"{sample.id}: transcript too short")
    y = _continue(teacher, sample, "emotion_continuation", sample.emotion, [hash_id(sample.id)])
    return replace(sample, continuation=y)


def construct_all(samples: Sequence[Sample], teacher: TeacherLM, emotion: bool,
                  workers: int | None = None) -> list[Sample]:
    fn = construct_emotion_continuation if emotion else construct_continuation
    return _parallel_map(lambda s: fn(s, teacher), samples, workers)


def hash_id(sample_id: str) -> int:
    """Stable 32-bit integer derived from a sample id (not Python's salted hash)."""
    h = 2166136261
    for b in sample_id.encode("utf-8"):
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_corpus(stem: str | os.PathLike, samples: Sequence[Sample]) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    jsonl, speech = stem.with_suffix(".jsonl"), stem.with_suffix(".speech")
    dim = int(samples[0].frames.shape[1]) if samples else 0
    header = 8 + 8 + 12 * len(samples)
    offsets, off = [], header
    for s in samples:
        if s.frames.shape[1] != dim:
            raise ValueError("all samples in a corpus must share the frame dimension")
        offsets.append(off)
        off += s.frames.size * 4
    with open(speech.with_suffix(".speech.tmp"), "wb") as f:
        f.write(SPEECH_MAGIC)
        f.write(struct.pack("<II", len(samples), dim))
        for s, o in zip(samples, offsets):
            f.write(struct.pack("<QI", o, len(s.frames)))
        for s in samples:
            f.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
    os.replace(speech.with_suffix(".speech.tmp"), speech)
    with open(jsonl.with_suffix(".jsonl.tmp"), "w", encoding="utf-8") as f:
        for i, s in enumerate(samples):
            rec = {"id": s.id, "kind": s.kind, "tokens": [int(t) for t in s.tokens], "speech_ref": i}
            if s.emotion is not None:
                rec["emotion"] = s.emotion.value
            if s.continuation is not None:
                rec["continuation"] = [int(t) for t in s.continuation]
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(jsonl.with_suffix(".jsonl.tmp"), jsonl)
    return jsonl, speech


def read_speech(path: str | os.PathLike) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != SPEECH_MAGIC:
        raise ValueError(f"{path}: bad speech file magic")
    count, dim = struct.unpack_from("<II", raw, 8)
    out = []
    for i in range(count):
        off, n = struct.unpack_from("<QI", raw, 16 + 12 * i)
        arr = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
        out.append(arr.astype(np.float32))
    return out


def read_corpus(stem: str | os.PathLike) -> list[Sample]:
    stem = Path(stem)
    frames = read_speech(stem.with_suffix(".speech"))
    out = []
    with open(stem.with_suffix(".jsonl"), encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            e = EmotionLabel(rec["emotion"]) if "emotion" in rec else None
            out.append(Sample(rec["id"], rec["kind"], rec["tokens"], frames[rec["speech_ref"]], e,
                              rec.get("continuation")))
    return out
