"""Judge-based response suites and JSON report files."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from ..datagen.corpus import Sample
from ..datagen.vocab import Vocabulary
from ..model.network import EmoAlignModel
from .judge import JudgeBackend, JudgeParseError, judge_score, judge_winrate
from .ser import generate_from_speech


def respond(model: EmoAlignModel, vocab: Vocabulary, sample: Sample) -> str:
    """The model's greedy reply to spoken input under the emotion training prompt."""
    return vocab.decode(generate_from_speech(model, "emotion_training", vocab, sample.frames))


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def response_suite(model: EmoAlignModel, samples: Sequence[Sample], vocab: Vocabulary,
                   backend: JudgeBackend, workers: int = 1) -> dict:
    """Quality and empathy ratings of spoken-input replies."""
    if not samples:
        raise ValueError("empty test set")
    responses = [respond(model, vocab, s) for s in samples]

    def rate(i):
        s = samples[i]
        item = {"id": s.id, "emotion": s.emotion.value, "instruction": vocab.decode(s.tokens),
                "response": responses[i]}
        for kind in ("quality", "empathy"):
            try:
                item[kind] = judge_score(kind, item["instruction"], item["emotion"], responses[i], backend).score
            except JudgeParseError:
                item[kind] = None
        return item

    items = _map(rate, range(len(samples)), workers)
    out = {"suite": "response", "total": len(items), "items": items}
    for kind in ("quality", "empathy"):
        vals = [it[kind] for it in items if it[kind] is not None]
        out[f"mean_{kind}"] = sum(vals) / len(vals) if vals else None
        out[f"{kind}_parse_errors"] = len(items) - len(vals)
    return out


def history_for(samples: Sequence[Sample], i: int, vocab: Vocabulary) -> list[str]:
    """Two earlier samples (cyclically) and their continuations, then sample ``i``."""
    n = len(samples)
    p2, p1 = samples[(i - 2) % n], samples[(i - 1) % n]
    return [vocab.decode(p2.tokens), vocab.decode(p2.continuation or []),
            vocab.decode(p1.tokens), vocab.decode(p1.continuation or []),
            vocab.decode(samples[i].tokens)]


def winrate_suite(model_a: EmoAlignModel, model_b: EmoAlignModel, samples: Sequence[Sample],
                  vocab: Vocabulary, backend: JudgeBackend, workers: int = 1) -> dict:
    """Pairwise AB/BA comparison of two models' replies on the same inputs."""
    if not samples:
        raise ValueError("empty test set")
    resp_a = [respond(model_a, vocab, s) or "<empty>" for s in samples]
    resp_b = resp_a if model_b is model_a else [respond(model_b, vocab, s) or "<empty>" for s in samples]

    def compare(i):
        v = judge_winrate(history_for(samples, i, vocab), samples[i].emotion.value, resp_a[i], resp_b[i], backend)
        return {"id": samples[i].id, "response_a": resp_a[i], "response_b": resp_b[i], "choice": v.choice,
                "consistent": v.consistent, "parse_error": v.parse_error}

    items = _map(compare, range(len(samples)), workers)
    n = len(items)
    wins = sum(it["choice"] == "A" for it in items)
    losses = sum(it["choice"] == "B" for it in items)
    ties = n - wins - losses
    return {"suite": "winrate", "total": n, "wins": wins, "losses": losses, "ties": ties,
            "win_rate": wins / n, "loss_rate": losses / n, "tie_rate": ties / n, "items": items}


def write_report(path: str | os.PathLike, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path
