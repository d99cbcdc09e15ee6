"""Run configuration: one JSON document per run.

Schema (version 1)::

    {
      "schema_version": 1,
      "seed": 0,                      # required; copied into every component seed
      "world":   {SyntheticWorldConfig fields},
      "model":   {ModelConfig fields},
      "teacher": {TeacherTrainConfig fields},
      "stage1":  {StageConfig fields},
      "stage2":  {StageConfig fields},
      "mode": "blsp_emo",             # default stage-2 mode
      "paths": {"corpus_dir": ..., "checkpoint_dir": ..., "run_dir": ...},
      "judge": {JudgeBackendConfig fields},
      "eval":  {"n_response": 20, "n_winrate": 20}
    }

Relative paths resolve against the directory holding the config file.
Omitted sections take their defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..alignment.config import StageConfig, TrainMode, stage1_defaults, stage2_defaults
from ..datagen.teacher import TeacherTrainConfig
from ..datagen.world import SyntheticWorldConfig
from ..evaluation.judge import JudgeBackendConfig
from ..model.config import ModelConfig

SCHEMA_VERSION = 1
_SECTIONS = {"schema_version", "seed", "world", "model", "teacher", "stage1", "stage2", "mode", "paths",
             "judge", "eval"}


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus_dir: Path
    checkpoint_dir: Path
    run_dir: Path


@dataclass
class RunConfig:
    seed: int
    world: SyntheticWorldConfig
    model: ModelConfig
    teacher: TeacherTrainConfig
    stage1: StageConfig
    stage2: StageConfig
    mode: TrainMode
    paths: Paths
    judge: JudgeBackendConfig
    eval: dict = field(default_factory=lambda: {"n_response": 20, "n_winrate": 20})

    # hashing --------------------------------------------------------------
    def section_hash(self, *sections: str, extra: dict | None = None) -> str:
        """12-hex-digit digest of the named sections (plus ``extra``) as canonical JSON."""
        doc = {s: self._as_json(s) for s in sections}
        if extra:
            doc["extra"] = extra
        raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(raw).hexdigest()[:12]

    def _as_json(self, section: str):
        v = getattr(self, section)
        if hasattr(v, "to_dict"):
            return v.to_dict()
        if isinstance(v, TrainMode):
            return v.value
        return v

    def to_dict(self) -> dict:
        d = {s: self._as_json(s) for s in ("seed", "world", "model", "teacher", "stage1", "stage2", "mode",
                                           "judge", "eval")}
        d["schema_version"] = SCHEMA_VERSION
        d["paths"] = {k: str(v) for k, v in vars(self.paths).items()}
        return d

    @property
    def teacher_hash(self) -> str:
        return self.section_hash("world", "model", "teacher")


def _build(cls, data, name, **forced):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    try:
        return cls(**{**data, **forced})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def parse_config(doc: dict, base_dir: Path) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if "seed" not in doc:
        raise ConfigError("seed is required")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    world = _build(SyntheticWorldConfig, doc.get("world"), "world", seed=seed)
    model = _build(ModelConfig, doc.get("model"), "model")
    if model.vocab_size != world.vocab_size:
        raise ConfigError("model.vocab_size must equal world.vocab_size")
    if model.d_audio != world.d_audio:
        raise ConfigError("model.d_audio must equal world.d_audio")
    teacher = _build(TeacherTrainConfig, doc.get("teacher"), "teacher", seed=seed)
    stage1 = _build(stage1_defaults, doc.get("stage1"), "stage1", seed=seed)
    stage2 = _build(stage2_defaults, doc.get("stage2"), "stage2", seed=seed)
    try:
        mode = TrainMode(doc.get("mode", "blsp_emo"))
    except ValueError:
        raise ConfigError(f"unknown mode {doc.get('mode')!r}") from None
    p = doc.get("paths") or {}
    if not isinstance(p, dict) or set(p) - {"corpus_dir", "checkpoint_dir", "run_dir"}:
        raise ConfigError("paths may only hold corpus_dir, checkpoint_dir and run_dir")
    paths = Paths(*((base_dir / p.get(k, default)).resolve() for k, default in
                    (("corpus_dir", "corpus"), ("checkpoint_dir", "checkpoints"), ("run_dir", "runs"))))
    judge = _build(JudgeBackendConfig, doc.get("judge"), "judge")
    ev = {"n_response": 20, "n_winrate": 20}
    ev_in = doc.get("eval") or {}
    if set(ev_in) - set(ev):
        raise ConfigError(f"unknown eval keys {sorted(set(ev_in) - set(ev))}")
    ev.update(ev_in)
    if any(not isinstance(v, int) or v < 1 for v in ev.values()):
        raise ConfigError("eval sizes must be positive integers")
    return RunConfig(seed, world, model, teacher, stage1, stage2, mode, paths, judge, ev)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc, path.resolve().parent)


def with_stage(cfg: RunConfig, stage: int, **changes) -> RunConfig:
    key = f"stage{stage}"
    return replace(cfg, **{key: replace(getattr(cfg, key), **changes)})
