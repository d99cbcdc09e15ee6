"""Plain-text summary of a run directory: loss curves and a mode comparison."""

from __future__ import annotations

import json
from pathlib import Path

NOT_EVALUATED = "not evaluated"

_COLUMNS = (
    ("SER acc", "ser", "accuracy"),
    ("agree", "agreement", "match_rate"),
    ("KL", "agreement", "mean_kl"),
    ("cont CE", "agreement", "continuation_ce"),
    ("quality", "response", "mean_quality"),
    ("empathy", "response", "mean_empathy"),
)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _fmt(v) -> str:
    if v is None:
        return NOT_EVALUATED
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return [line(header), line(["-" * w for w in widths]), *map(line, rows)]


def collect(run_dir: Path) -> tuple[list[dict], list[dict]]:
    """Training manifests (with their loss records) and evaluation reports under ``run_dir``."""
    runs = []
    for m in sorted(run_dir.glob("*/manifest.json")):
        doc = json.loads(m.read_text(encoding="utf-8"))
        if doc.get("kind") != "train":
            continue
        doc["losses"] = _read_jsonl(m.parent / "losses.jsonl")
        runs.append(doc)
    reports = [json.loads(p.read_text(encoding="utf-8")) for p in sorted((run_dir / "reports").glob("*.json"))]
    return runs, reports


def loss_summary(runs: list[dict]) -> list[str]:
    rows = []
    for r in runs:
        losses = r["losses"]
        if not losses:
            rows.append([r["label"], "0", "-", "-", "-"])
            continue
        totals = [x["total"] for x in losses]
        rows.append([r["label"], str(len(losses)), f"{totals[0]:.4f}", f"{min(totals):.4f}", f"{totals[-1]:.4f}"])
    if not rows:
        return ["no training runs"]
    return _table(["run", "steps", "first", "min", "last"], rows)


def mode_table(runs: list[dict], reports: list[dict]) -> list[str]:
    by_label: dict[str, dict[str, dict]] = {}
    for rep in reports:
        if rep["suite"] == "winrate":
            continue
        label = rep["checkpoints"][0]["label"]
        by_label.setdefault(label, {})[rep["suite"]] = rep["result"]
    labels = [r["label"] for r in runs] + sorted(set(by_label) - {r["label"] for r in runs})
    if not labels:
        return ["no runs or reports"]
    rows = []
    for label in labels:
        res = by_label.get(label, {})
        rows.append([label] + [_fmt(res[suite].get(key)) if suite in res else NOT_EVALUATED
                               for _, suite, key in _COLUMNS])
    return _table(["run"] + [c for c, _, _ in _COLUMNS], rows)


def winrate_lines(reports: list[dict]) -> list[str]:
    out = []
    for rep in reports:
        if rep["suite"] != "winrate":
            continue
        a, b = (c["label"] for c in rep["checkpoints"])
        r = rep["result"]
        out.append(f"{a} vs {b}: win {r['win_rate']:.3f} loss {r['loss_rate']:.3f} tie {r['tie_rate']:.3f}"
                   f" (n={r['total']})")
    return out or ["no pairwise comparisons"]


def render_summary(run_dir: Path) -> str:
    runs, reports = collect(run_dir)
    parts = ["Loss curves", *loss_summary(runs), "", "Mode comparison", *mode_table(runs, reports), "",
             "Pairwise win rates", *winrate_lines(reports)]
    return "\n".join(parts) + "\n"


def cmd_report(run_dir: Path) -> str:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    runs, reports = collect(run_dir)
    if not runs and not reports:
        raise FileNotFoundError(f"run directory {run_dir} holds no training logs or reports")
    text = render_summary(run_dir)
    (run_dir / "summary.txt").write_text(text, encoding="utf-8")
    return text
