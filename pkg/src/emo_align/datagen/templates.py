"""Prompt templates, stored verbatim under ``templates/``.

Language-model prompts use angle-bracket slots (``<transcript>``,
``<emotion>``, ``<speech features>``, ``<transcript|speech>``,
``<text continuation>``); judge prompts use ``{name}`` slots. A template is
rendered two ways: to a string (golden-file comparisons, judge calls) and to
a token layout for the language model, where every literal segment becomes a
single reserved token.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .vocab import BOS, EmotionLabel, Vocabulary

SPEECH_MARKER = "<speech>"

# slot text -> canonical slot name
_ANGLE_SLOTS = {
    "<transcript>": "transcript",
    "<emotion>": "emotion",
    "<speech features>": "speech",
    "<transcript|speech>": "content",
    "<text continuation>": "continuation",
}
_ANGLE_RE = re.compile("|".join(re.escape(s) for s in _ANGLE_SLOTS))
_CURLY_RE = re.compile(r"\{([a-z_0-9]+)\}")

LM_TEMPLATES = (
    "continuation",
    "emotion_continuation",
    "emotion_training",
    "ser",
    "cascaded_response",
)
JUDGE_TEMPLATES = ("judge_quality", "judge_empathy", "judge_winrate")


class TemplateError(ValueError):
    """A slot was left unbound, bound twice, or bound to the wrong kind of value."""


@dataclass(frozen=True)
class Layout:
    """Token-level frame of one assembled LM input.

    ``ids`` holds token ids with a 0 placeholder at speech positions;
    ``speech`` flags those positions; continuation tokens occupy
    ``ids[loss_start:]``.
    """

    ids: np.ndarray
    speech: np.ndarray
    loss_start: int

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def n_speech(self) -> int:
        return int(self.speech.sum())


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str
    parts: tuple[tuple[str, str], ...]  # ("literal", text) | ("slot", name)

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(v for k, v in self.parts if k == "slot")

    @property
    def literals(self) -> tuple[str, ...]:
        return tuple(v for k, v in self.parts if k == "literal" and v)

    def render(self, **values: str) -> str:
        """Substitute string values; a speech slot renders as ``<speech>``."""
        values = dict(values)
        if "speech" in self.slots and "speech" not in values:
            values["speech"] = SPEECH_MARKER
        self._check_bound(values, optional=("continuation",))
        out = []
        for kind, v in self.parts:
            if kind == "literal":
                out.append(v)
            elif v == "continuation" and v not in values:
                out.append(_slot_text(self, v))
            else:
                out.append(values[v])
        return "".join(out)

    def layout(
        self,
        vocab: Vocabulary,
        *,
        transcript=None,
        emotion: EmotionLabel | None = None,
        n_speech: int | None = None,
        continuation=None,
        tag: EmotionLabel | None = None,
    ) -> Layout:
        """Token layout with BOS, one token per literal segment and slot payloads.

        ``tag`` appends an emotion token right after the transcript payload;
        it is only used when building the teacher's training mixture.
        """
        ids: list[int] = [BOS]
        speech: list[bool] = [False]
        bound = set()
        for kind, v in self.parts:
            if kind == "literal":
                if v:
                    ids.append(vocab.segment_id(v))
                    speech.append(False)
                continue
            if v == "continuation":
                continue
            slot = v
            if slot in ("content", "transcript", "speech"):
                # the text path and the speech path share one prompt frame
                if (transcript is None) == (n_speech is None):
                    raise TemplateError(f"{self.template_id}: {slot} slot needs exactly one of transcript / speech")
                slot = "transcript" if transcript is not None else "speech"
            if slot == "transcript":
                if transcript is None:
                    raise TemplateError(f"{self.template_id}: transcript unbound")
                payload = [int(t) for t in transcript]
                if tag is not None:
                    payload.append(vocab.emotion_id(tag))
                ids.extend(payload)
                speech.extend([False] * len(payload))
            elif slot == "speech":
                if n_speech is None or n_speech < 1:
                    raise TemplateError(f"{self.template_id}: speech unbound")
                ids.extend([0] * n_speech)
                speech.extend([True] * n_speech)
            elif slot == "emotion":
                if emotion is None:
                    raise TemplateError(f"{self.template_id}: emotion unbound")
                ids.append(vocab.emotion_id(emotion))
                speech.append(False)
            bound.add(slot)
        if transcript is not None and "transcript" not in bound:
            raise TemplateError(f"{self.template_id}: transcript given but template has no such slot")
        if n_speech is not None and "speech" not in bound:
            raise TemplateError(f"{self.template_id}: speech given but template has no such slot")
        if emotion is not None and "emotion" not in bound:
            raise TemplateError(f"{self.template_id}: emotion given but template has no such slot")
        loss_start = len(ids)
        if continuation is not None:
            cont = [int(t) for t in continuation]
            ids.extend(cont)
            speech.extend([False] * len(cont))
        return Layout(np.asarray(ids, dtype=np.int64), np.asarray(speech, dtype=bool), loss_start)

    def extract(self, text: str) -> dict[str, str] | None:
        """Inverse of :meth:`render`: slot values if ``text`` is a rendering of this template."""
        pattern = "".join(re.escape(v) if k == "literal" else f"(?P<{v}>.*?)" for k, v in self.parts)
        m = re.fullmatch(pattern, text, flags=re.DOTALL)
        return None if m is None else m.groupdict()

    def _check_bound(self, values: dict, optional=()) -> None:
        needed = [s for s in self.slots if s not in optional]
        missing = [s for s in needed if s not in values]
        if missing:
            raise TemplateError(f"{self.template_id}: unbound slot(s) {missing}")
        extra = [k for k in values if k not in self.slots]
        if extra:
            raise TemplateError(f"{self.template_id}: unknown slot(s) {extra}")


def _slot_text(t: PromptTemplate, name: str) -> str:
    if t.template_id in JUDGE_TEMPLATES:
        return "{" + name + "}"
    return next(k for k, v in _ANGLE_SLOTS.items() if v == name)


def _parse(template_id: str, text: str) -> PromptTemplate:
    regex = _CURLY_RE if template_id in JUDGE_TEMPLATES else _ANGLE_RE
    parts: list[tuple[str, str]] = []
    pos = 0
    seen = set()
    for m in regex.finditer(text):
        parts.append(("literal", text[pos : m.start()]))
        name = m.group(1) if regex is _CURLY_RE else _ANGLE_SLOTS[m.group(0)]
        if name in seen:
            raise TemplateError(f"{template_id}: slot {name!r} appears twice")
        seen.add(name)
        parts.append(("slot", name))
        pos = m.end()
    parts.append(("literal", text[pos:]))
    return PromptTemplate(template_id, text, tuple(parts))


def template_text(template_id: str) -> str:
    return resources.files(__package__).joinpath("templates", f"{template_id}.txt").read_text(encoding="utf-8")


@functools.lru_cache(maxsize=None)
def get_template(template_id: str) -> PromptTemplate:
    if template_id not in LM_TEMPLATES + JUDGE_TEMPLATES:
        raise KeyError(template_id)
    return _parse(template_id, template_text(template_id))


def lm_segments() -> list[str]:
    """Distinct literal segments over all LM templates, in a fixed order."""
    out: list[str] = []
    for tid in LM_TEMPLATES:
        for lit in get_template(tid).literals:
            if lit not in out:
                out.append(lit)
    return out


def build_vocabulary(size: int) -> Vocabulary:
    return Vocabulary(size, lm_segments())
