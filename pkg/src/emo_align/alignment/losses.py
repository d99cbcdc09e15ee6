"""Alignment objectives over batches of corpus samples.

Every loss reduces per-position terms to a per-sequence mean over the scored
continuation positions, then averages over the batch.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import numerics as N
from ..datagen.corpus import Sample
from ..datagen.teacher import TeacherLM
from ..datagen.templates import Layout, get_template
from ..datagen.vocab import EOS, EmotionLabel, Vocabulary
from ..model.network import Assembled, EmoAlignModel
from ..numerics import Tensor


def speech_layout(template_id: str, vocab: Vocabulary, n_speech: int, continuation=None) -> Layout:
    return get_template(template_id).layout(vocab, n_speech=n_speech, continuation=continuation)


def speech_forward(model: EmoAlignModel, samples: Sequence[Sample]) -> tuple[Tensor, np.ndarray]:
    """Encoder + adapter over a batch; returns speech embeddings and their lengths."""
    return model.speech_embeddings([s.frames for s in samples])


def student_forward(model: EmoAlignModel, template_id: str, vocab: Vocabulary, targets: Sequence[Sequence[int]],
                    speech: Tensor, slen: np.ndarray) -> tuple[Tensor, Assembled]:
    """Teacher-forced speech-path log-probabilities for the given continuations."""
    layouts = [speech_layout(template_id, vocab, int(n), y) for n, y in zip(slen, targets)]
    asm = model.assemble(layouts, speech, slen)
    logits = model.lm_forward(asm.embeddings, asm.speech_mask)
    return N.log_softmax(logits, axis=-1), asm


def teacher_targets(teacher: TeacherLM, samples: Sequence[Sample], batch_size: int = 64) -> list[np.ndarray]:
    """Teacher next-token distributions over each sample's continuation, [len(y), V] each.

    The teacher reads the transcript under the plain continuation prompt.
    """
    out: list[np.ndarray] = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        layouts = [teacher.prompt("continuation", s.tokens, continuation=s.continuation) for s in chunk]
        probs, mask = teacher.distributions(layouts)
        for b in range(len(chunk)):
            out.append(probs[b][mask[b] > 0].astype(np.float64))
    return out


def place_targets(per_sample: Sequence[np.ndarray], asm: Assembled, dtype) -> np.ndarray:
    """Scatter per-sample [len(y), V] rows onto the scored positions of ``asm``."""
    B, T = asm.loss_mask.shape
    V = per_sample[0].shape[1]
    out = np.zeros((B, T, V), dtype=dtype)
    for b, p in enumerate(per_sample):
        pos = np.flatnonzero(asm.loss_mask[b])
        if len(pos) != len(p):
            raise ValueError(f"sample {b}: {len(p)} teacher rows for {len(pos)} scored positions")
        out[b, pos] = p
    return out


def semantic_loss(model: EmoAlignModel, samples: Sequence[Sample], teacher_probs: Sequence[np.ndarray],
                  vocab: Vocabulary, speech: tuple[Tensor, np.ndarray] | None = None) -> tuple[Tensor, float]:
    """KL cross term between the teacher (text path) and the student (speech path).

    Returns the differentiable cross term and the teacher entropy under the
    same reduction; their difference is the KL divergence.
    """
    if any(p.shape[-1] != model.cfg.vocab_size for p in teacher_probs):
        raise ValueError("teacher and student vocabularies differ")
    speech, slen = speech if speech is not None else speech_forward(model, samples)
    logp, asm = student_forward(model, "continuation", vocab, [s.continuation for s in samples], speech, slen)
    p = place_targets(teacher_probs, asm, logp.dtype)
    cross = N.kl_divergence(p, logp, asm.loss_mask)
    return cross, N.entropy(p, asm.loss_mask)


def continuation_loss(model: EmoAlignModel, template_id: str, vocab: Vocabulary, targets: Sequence[Sequence[int]],
                      speech: Tensor, slen: np.ndarray) -> Tensor:
    """Mean token cross-entropy of ``targets`` after a speech prompt."""
    if any(len(y) == 0 for y in targets):
        raise ValueError("empty continuation")
    logp, asm = student_forward(model, template_id, vocab, targets, speech, slen)
    return N.cross_entropy(logp, asm.targets, asm.loss_mask)


def emotion_continuation_loss(model: EmoAlignModel, samples: Sequence[Sample], vocab: Vocabulary,
                              speech: tuple[Tensor, np.ndarray] | None = None) -> Tensor:
    """Cross-entropy of emotion-aware continuations under the emotion training prompt."""
    speech, slen = speech if speech is not None else speech_forward(model, samples)
    return continuation_loss(model, "emotion_training", vocab, [s.continuation for s in samples], speech, slen)


def ser_loss(model: EmoAlignModel, speech: Tensor, slen: np.ndarray, labels: Sequence[EmotionLabel]) -> Tensor:
    """Negative log-likelihood of the true label under the pooled classifier head."""
    logp = model.classify_emotion(speech, slen)
    return N.cross_entropy(logp, np.array([e.index for e in labels]))


def ser_prompt_targets(vocab: Vocabulary, labels: Sequence[EmotionLabel]) -> list[list[int]]:
    """Label word followed by end-of-sequence, the generative SER answer."""
    return [[vocab.emotion_id(e), EOS] for e in labels]
