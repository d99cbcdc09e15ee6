"""Judge harness: prompt rendering, reply parsing, offline and remote backends.

Backends expose ``complete(prompt) -> str``. The offline judge scores with a
fixed rubric so the harness runs without network access:

* quality: ``round(7 * overlap) + band`` capped at 10, where ``overlap`` is
  the share of distinct instruction words that reappear in the response and
  ``band`` is 3 for responses of 3 to 40 words, otherwise 1.
* empathy: 2 for any non-empty response, +4 if it names the user's emotion,
  +2 per support phrase (at most +4), capped at 10.
* winrate: each response gets quality against the last user turn plus
  empathy; the higher total wins and equal totals go to the first response.

An empty response scores 0 under every rubric.
"""

from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import httpx

from ..datagen.templates import JUDGE_TEMPLATES, get_template

SUPPORT_PHRASES = ("sorry", "understand", "here for you", "help", "support", "glad to hear", "take care")
_WORD_RE = re.compile(r"[a-z0-9']+")
_SCORE_RE = re.compile(r"<score>\s*(-?\d+)\s*</score>", re.IGNORECASE)
_CHOICE_RE = re.compile(r"<choice>\s*(?:response\s+|assistant\s+)?([ab])\s*</choice>", re.IGNORECASE)


class JudgeParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class JudgeBackendError(RuntimeError):
    pass


class JudgeBackend(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass
class JudgeVerdict:
    """``score`` for quality/empathy; ``choice`` is ``A``, ``B`` or ``tie`` for winrate."""

    kind: str
    score: int | None = None
    choice: str | None = None
    raw: list[str] = field(default_factory=list)
    consistent: bool | None = None
    parse_error: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class JudgeBackendConfig:
    kind: str = "offline_heuristic"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "EMO_ALIGN_JUDGE_API_KEY"
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 1.0
    max_concurrency: int = 4

    def __post_init__(self):
        if self.kind not in ("offline_heuristic", "remote_chat"):
            raise ValueError(f"unknown judge backend {self.kind!r}")
        if self.kind == "remote_chat":
            if not self.endpoint or not self.model:
                raise ValueError("remote_chat needs endpoint and model")
            if not self.endpoint.startswith("https://"):
                raise ValueError("remote judge endpoint must use https")
        if self.retries < 0 or self.timeout <= 0 or self.max_concurrency < 1:
            raise ValueError("invalid judge timeout/retry/concurrency settings")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# rendering and parsing
# ---------------------------------------------------------------------------

def render_judge_prompt(template_id: str, **fields: str) -> str:
    if template_id not in JUDGE_TEMPLATES:
        raise KeyError(template_id)
    return get_template(template_id).render(**fields)


def parse_score(text: str) -> int:
    m = _SCORE_RE.search(text)
    if m is None:
        raise JudgeParseError("no <score> tag in judge reply", text)
    score = int(m.group(1))
    if not 0 <= score <= 10:
        raise JudgeParseError(f"score {score} outside 0-10", text)
    return score


def parse_choice(text: str) -> str:
    m = _CHOICE_RE.search(text)
    if m is None:
        raise JudgeParseError("no <choice> tag in judge reply", text)
    return m.group(1).upper()


# ---------------------------------------------------------------------------
# offline rubric
# ---------------------------------------------------------------------------

def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def quality_rubric(instruction: str, response: str) -> int:
    resp = _words(response)
    if not resp:
        return 0
    instr = set(_words(instruction))
    overlap = len(instr & set(resp)) / max(1, len(instr))
    band = 3 if 3 <= len(resp) <= 40 else 1
    return min(10, round(7 * overlap) + band)


def empathy_rubric(emotion: str, response: str) -> int:
    resp = _words(response)
    if not resp:
        return 0
    score = 2
    if emotion.strip().lower() in resp:
        score += 4
    low = " ".join(resp)
    support = sum(1 for p in SUPPORT_PHRASES if re.search(r"\b" + re.escape(p) + r"\b", low))
    score += min(4, 2 * support)
    return min(10, score)


class OfflineHeuristicJudge:
    """Deterministic stand-in for a chat-model judge."""

    def complete(self, prompt: str) -> str:
        for tid in JUDGE_TEMPLATES:
            fields = get_template(tid).extract(prompt)
            if fields is not None:
                return getattr(self, f"_{tid}")(fields)
        raise JudgeBackendError("prompt does not match any judge template")

    @staticmethod
    def _judge_quality(f: dict) -> str:
        s = quality_rubric(f["instruction"], f["response"])
        return f"The response addresses the instruction to degree {s}.\n<score>{s}</score>"

    @staticmethod
    def _judge_empathy(f: dict) -> str:
        s = empathy_rubric(f["emotion"], f["response"])
        return f"The response shows empathy to degree {s}.\n<score>{s}</score>"

    @staticmethod
    def _judge_winrate(f: dict) -> str:
        def total(r):
            return quality_rubric(f["text_u3"], r) + empathy_rubric(f["emotion"], r)

        a, b = total(f["response_a"]), total(f["response_b"])
        choice = "A" if a >= b else "B"
        return f"Totals A={a}, B={b}.\n<choice>{choice}</choice>"


# ---------------------------------------------------------------------------
# remote backend
# ---------------------------------------------------------------------------

_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteChatJudge:
    """Chat-completion client.

    The API key is read from the configured environment variable on each
    call and is sent only in the ``Authorization`` header.
    """

    def __init__(self, cfg: JudgeBackendConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if cfg.kind != "remote_chat":
            raise ValueError("RemoteChatJudge needs a remote_chat config")
        self.cfg = cfg
        self._client = httpx.Client(timeout=cfg.timeout, transport=transport)
        self._sleep = sleep
        self._gate = threading.Semaphore(cfg.max_concurrency)

    def close(self) -> None:
        self._client.close()

    def complete(self, prompt: str) -> str:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise JudgeBackendError(f"environment variable {self.cfg.api_key_env} is not set")
        body = {"model": self.cfg.model, "messages": [{"role": "user", "content": prompt}], "temperature": 0}
        headers = {"Authorization": f"Bearer {key}"}
        last = None
        with self._gate:
            for attempt in range(self.cfg.retries + 1):
                if attempt:
                    self._sleep(self.cfg.backoff * 2 ** (attempt - 1))
                try:
                    resp = self._client.post(self.cfg.endpoint, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = f"transport error: {type(exc).__name__}"
                    continue
                if resp.status_code in _RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code != 200:
                    raise JudgeBackendError(f"judge endpoint returned HTTP {resp.status_code}")
                try:
                    return resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise JudgeBackendError("malformed chat-completion response") from exc
        raise JudgeBackendError(f"judge request failed after {self.cfg.retries + 1} attempts ({last})")


def make_backend(cfg: JudgeBackendConfig, transport: httpx.BaseTransport | None = None) -> JudgeBackend:
    if cfg.kind == "offline_heuristic":
        return OfflineHeuristicJudge()
    return RemoteChatJudge(cfg, transport)


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def judge_score(kind: str, instruction: str, emotion: str, response: str, backend: JudgeBackend) -> JudgeVerdict:
    """Single-response rating. Raises :class:`JudgeParseError` (raw text kept) on a bad reply."""
    if kind not in ("quality", "empathy"):
        raise ValueError(f"unknown score kind {kind!r}")
    prompt = render_judge_prompt(f"judge_{kind}", instruction=instruction, emotion=emotion, response=response)
    raw = backend.complete(prompt)
    return JudgeVerdict(kind, score=parse_score(raw), raw=[raw])


def judge_winrate(history: Sequence[str], emotion: str, response_a: str, response_b: str,
                  backend: JudgeBackend) -> JudgeVerdict:
    """Pairwise comparison asked in both orders.

    ``history`` is (user 1, assistant 1, user 2, assistant 2, user 3). A
    response wins only when preferred in both orders; anything else,
    including an unparseable reply, is a tie.
    """
    if not response_a or not response_b:
        raise ValueError("both responses must be non-empty")
    if len(history) != 5:
        raise ValueError("history must hold five turns")
    u1, a1, u2, a2, u3 = history
    base = dict(text_u1=u1, text_a1=a1, text_u2=u2, text_a2=a2, text_u3=u3, emotion=emotion)
    raw_ab = backend.complete(render_judge_prompt("judge_winrate", response_a=response_a, response_b=response_b, **base))
    raw_ba = backend.complete(render_judge_prompt("judge_winrate", response_a=response_b, response_b=response_a, **base))
    try:
        first = parse_choice(raw_ab)
        second = {"A": "B", "B": "A"}[parse_choice(raw_ba)]
    except JudgeParseError:
        return JudgeVerdict("winrate", choice="tie", raw=[raw_ab, raw_ba], consistent=False, parse_error=True)
    consistent = first == second
    return JudgeVerdict("winrate", choice=first if consistent else "tie", raw=[raw_ab, raw_ba],
                        consistent=consistent)
