"""Generative speech emotion recognition and behaviour-agreement evaluation."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..alignment.losses import continuation_loss, speech_forward, speech_layout, teacher_targets
from ..alignment.train import heldout_kl
from ..datagen.corpus import MAX_NEW, Sample, finish_continuation
from ..datagen.teacher import TeacherLM
from ..datagen.vocab import EMOTIONS, EmotionLabel, Vocabulary
from ..model.network import EmoAlignModel
from .. import numerics as N

_LABEL_RE = re.compile(r"\b(" + "|".join(e.value for e in EMOTIONS) + r")\b", re.IGNORECASE)


def parse_emotion_label(output, vocab: Vocabulary | None = None) -> EmotionLabel | None:
    """First label name in the output (whole words, case-insensitive); ``None`` if there is none.

    ``output`` is a string or a token sequence (decoded with ``vocab``).
    """
    text = output if isinstance(output, str) else vocab.decode(output)
    best = None
    for m in _LABEL_RE.finditer(text):
        e = EmotionLabel(m.group(1).lower())
        key = (m.start(), e.index)
        if best is None or key < best[0]:
            best = (key, e)
    return None if best is None else best[1]


@dataclass
class SerReport:
    """Rows of ``confusion`` are true labels, columns predictions, canonical order.

    Unparseable outputs are wrong and are counted in ``unparseable_per_class``
    rather than in the confusion matrix, so each row plus its unparseable
    count equals that class's total.
    """

    accuracy: float
    per_class: dict[str, float]
    confusion: list[list[int]]
    unparseable: int
    unparseable_per_class: list[int]
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


def ser_report(truth: Sequence[EmotionLabel], predicted: Sequence[EmotionLabel | None]) -> SerReport:
    if not truth:
        raise ValueError("empty test set")
    k = len(EMOTIONS)
    conf = np.zeros((k, k), dtype=np.int64)
    unparse = np.zeros(k, dtype=np.int64)
    for t, p in zip(truth, predicted):
        if p is None:
            unparse[t.index] += 1
        else:
            conf[t.index, p.index] += 1
    totals = conf.sum(axis=1) + unparse
    per_class = {e.value: (float(conf[i, i] / totals[i]) if totals[i] else 0.0) for i, e in enumerate(EMOTIONS)}
    return SerReport(float(np.trace(conf) / len(truth)), per_class, conf.tolist(), int(unparse.sum()),
                     unparse.tolist(), len(truth))


def generate_from_speech(model: EmoAlignModel, template_id: str, vocab: Vocabulary, frames: np.ndarray,
                         max_new: int = MAX_NEW) -> list[int]:
    n = model.cfg.adapter.out_length(len(frames))
    return model.generate(speech_layout(template_id, vocab, n), frames, max_new=max_new)


def eval_ser(model: EmoAlignModel, samples: Sequence[Sample], vocab: Vocabulary,
             max_new: int = MAX_NEW) -> tuple[SerReport, list[str]]:
    """Greedy decode under the SER prompt with speech input and score the parsed label."""
    if not samples:
        raise ValueError("empty test set")
    outputs = [vocab.decode(generate_from_speech(model, "ser", vocab, s.frames, max_new)) for s in samples]
    preds = [parse_emotion_label(o) for o in outputs]
    return ser_report([s.emotion for s in samples], preds), outputs


@dataclass
class AgreementReport:
    """Speech-path vs text-path behaviour on continuation data.

    ``continuation_ce`` is the teacher-forced cross-entropy of the teacher's
    continuations under the speech path.
    """

    match_rate: float
    mean_kl: float
    continuation_ce: float
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


def continuation_ce(model: EmoAlignModel, samples: Sequence[Sample], vocab: Vocabulary,
                    batch_size: int = 64) -> float:
    total = 0.0
    with N.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            speech, slen = speech_forward(model, chunk)
            ce = continuation_loss(model, "continuation", vocab, [s.continuation for s in chunk], speech, slen)
            total += float(ce.data) * len(chunk)
    return total / len(samples)


def eval_agreement(model: EmoAlignModel, teacher: TeacherLM, samples: Sequence[Sample]) -> AgreementReport:
    """Exact-match rate of greedy speech-path decodes against the teacher's text-path decodes."""
    if not samples:
        raise ValueError("empty test set")
    vocab = teacher.vocab
    hits = 0
    for s in samples:
        ref = finish_continuation(teacher.generate("continuation", s.tokens, max_new=MAX_NEW))
        out = finish_continuation(generate_from_speech(model, "continuation", vocab, s.frames))
        hits += out == ref
    probs = teacher_targets(teacher, samples)
    kl = max(0.0, heldout_kl(model, teacher, samples, probs))
    return AgreementReport(hits / len(samples), kl, continuation_ce(model, samples, vocab), len(samples))
