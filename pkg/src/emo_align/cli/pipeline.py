"""Command implementations: datagen, train, eval, report.

Layout under the configured directories::

    checkpoint_dir/teacher-<hash>.ckpt
    checkpoint_dir/stage<N>-<mode>-<hash>-step<steps>.ckpt
    corpus_dir/{asr_train,asr_test,ser_train,ser_train_plain,ser_test}.{jsonl,speech}
    corpus_dir/manifest.json
    run_dir/stage<N>-<mode>-<hash>/{losses.jsonl,manifest.json}
    run_dir/reports/<suite>-<checkpoint stem>[-vs-<stem>].json
    run_dir/summary.txt

Checkpoints and reports are never overwritten: a rerun that would produce
different bytes is an error, a rerun producing identical bytes is a no-op.
"""

from __future__ import annotations

import contextlib
import datetime as _dt
import hashlib
import json
import os
from pathlib import Path
from typing import Callable

from .. import __version__
from ..alignment import ModeError, TrainMode, jsonl_logger, requires_init, train_stage1, train_stage2
from ..datagen.corpus import Sample, construct_all, gen_corpus, read_corpus, write_corpus
from ..datagen.teacher import TeacherLM, build_teacher
from ..datagen.world import SyntheticWorldConfig, World
from ..evaluation import eval_agreement, eval_ser, make_backend, response_suite, winrate_suite
from ..model.checkpoint import Checkpoint, model_from_checkpoint
from .config import ConfigError, RunConfig

CORPORA = ("asr_train", "asr_test", "ser_train", "ser_train_plain", "ser_test")


class RuntimeFailure(RuntimeError):
    """A command failed after its inputs were validated."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def write_once(path: Path, data: bytes) -> str:
    """Write ``data`` unless ``path`` exists; an existing file must hold the same bytes."""
    digest = hashlib.sha256(data).hexdigest()
    if path.exists():
        if sha256_file(path) != digest:
            raise RuntimeFailure(f"{path} exists with different contents; refusing to overwrite")
        return digest
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return digest


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock file guarding one command per run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeFailure(f"run directory {run_dir} is locked by another command ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# ---------------------------------------------------------------------------
# datagen
# ---------------------------------------------------------------------------

def teacher_path(cfg: RunConfig) -> Path:
    return cfg.paths.checkpoint_dir / f"teacher-{cfg.teacher_hash}.ckpt"


def load_teacher(cfg: RunConfig) -> TeacherLM:
    path = teacher_path(cfg)
    if not path.exists():
        raise ConfigError(f"teacher checkpoint {path} not found; run datagen first")
    ckpt = Checkpoint.load(path)
    world = World.build(SyntheticWorldConfig.from_dict(ckpt.config["world"]))
    return TeacherLM(model_from_checkpoint(ckpt), world)


def make_corpora(cfg: RunConfig, teacher: TeacherLM) -> dict[str, list[Sample]]:
    w, wc = teacher.world, cfg.world
    ser_train = gen_corpus("ser", w, teacher, wc.n_ser, "train")
    return {
        "asr_train": construct_all(gen_corpus("asr", w, teacher, wc.n_asr, "train"), teacher, emotion=False),
        "asr_test": construct_all(gen_corpus("asr", w, teacher, wc.n_test, "test"), teacher, emotion=False),
        "ser_train": construct_all(ser_train, teacher, emotion=True),
        "ser_train_plain": construct_all(ser_train, teacher, emotion=False),
        "ser_test": construct_all(gen_corpus("ser", w, teacher, wc.n_test, "test"), teacher, emotion=True),
    }


def cmd_datagen(cfg: RunConfig, log: Callable[[str], None] = print) -> dict:
    started = _now()
    tpath = teacher_path(cfg)
    if tpath.exists():
        log(f"reusing teacher {tpath.name}")
        teacher = load_teacher(cfg)
    else:
        log("training teacher")
        world = World.build(cfg.world)
        teacher = build_teacher(world, cfg.model, cfg.teacher,
                                log=lambda s, l: log(f"teacher step {s} loss {l:.4f}"))
        ckpt = Checkpoint(teacher.model.store.state_dict(), "teacher", "none",
                          {"model": cfg.model.to_dict(), "world": cfg.world.to_dict(),
                           "teacher": cfg.teacher.to_dict()}, cfg.seed)
        write_once(tpath, ckpt.to_bytes())
    log("generating corpora")
    corpora = make_corpora(cfg, teacher)
    files = {}
    for name, samples in corpora.items():
        for p in write_corpus(cfg.paths.corpus_dir / name, samples):
            files[p.name] = sha256_file(p)
    manifest = {"kind": "datagen", "config_hash": cfg.teacher_hash, "config": cfg.to_dict(),
                "teacher": {"path": tpath.name, "sha256": sha256_file(tpath)}, "artifacts": files,
                "counts": {k: len(v) for k, v in corpora.items()}, "tool_version": __version__,
                "started": started, "finished": _now()}
    write_json_atomic(cfg.paths.corpus_dir / "manifest.json", manifest)
    return manifest


def load_corpora(cfg: RunConfig, names=CORPORA) -> dict[str, list[Sample]]:
    out = {}
    for name in names:
        stem = cfg.paths.corpus_dir / name
        if not stem.with_suffix(".jsonl").exists():
            raise ConfigError(f"corpus {stem}.jsonl not found; run datagen first")
        out[name] = read_corpus(stem)
    return out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def run_label(stage: int, mode: TrainMode, cfg: RunConfig, init_sha: str | None) -> str:
    h = cfg.section_hash("world", "model", "teacher", f"stage{stage}",
                         extra={"mode": mode.value, "init": init_sha})
    return f"stage{stage}-{mode.value}-{h}"


def cmd_train(cfg: RunConfig, stage: int, mode: str | None = None, init: Path | None = None,
              log: Callable[[str], None] = print) -> dict:
    if stage not in (1, 2):
        raise ConfigError("--stage must be 1 or 2")
    try:
        mode = TrainMode(mode) if mode else (TrainMode.STAGE1_ONLY if stage == 1 else cfg.mode)
    except ValueError:
        raise ConfigError(f"unknown mode {mode!r}") from None
    if stage == 1 and mode is not TrainMode.STAGE1_ONLY:
        raise ConfigError(f"stage 1 does not accept mode {mode.value}")
    if stage == 2 and mode is TrainMode.STAGE1_ONLY:
        raise ConfigError("mode stage1_only has no stage 2")
    if stage == 1 and init is not None:
        raise ConfigError("stage 1 takes no --init")
    if stage == 2 and requires_init(mode) and init is None:
        raise ConfigError(f"mode {mode.value} requires --init <stage-1 checkpoint>")
    if stage == 2 and mode is TrainMode.EMO_NO_PRETRAIN and init is not None:
        raise ConfigError("mode emo_no_pretrain takes no --init")
    init_ckpt = init_sha = None
    if init is not None:
        if not Path(init).exists():
            raise ConfigError(f"init checkpoint {init} not found")
        init_ckpt = Checkpoint.load(init)
        init_sha = sha256_file(Path(init))

    label = run_label(stage, mode, cfg, init_sha)
    rdir = cfg.paths.run_dir / label
    mpath = rdir / "manifest.json"
    if mpath.exists():
        done = json.loads(mpath.read_text(encoding="utf-8"))
        if (cfg.paths.checkpoint_dir / done["artifacts"]["checkpoint"]["path"]).exists():
            log(f"{label} already complete")
            return done
    teacher = load_teacher(cfg)
    names = ("asr_train", "asr_test") if stage == 1 else ("ser_train", "ser_train_plain")
    data = load_corpora(cfg, names)
    rdir.mkdir(parents=True, exist_ok=True)
    loss_log = rdir / "losses.jsonl"
    loss_log.write_text("", encoding="utf-8")  # a previous attempt never completed
    started = _now()
    log(f"training {label}")
    try:
        if stage == 1:
            _, ckpt = train_stage1(teacher, data["asr_train"], cfg.stage1, heldout=data["asr_test"],
                                   log=jsonl_logger(loss_log))
        else:
            _, ckpt = train_stage2(teacher, data["ser_train"], cfg.stage2, mode, init=init_ckpt,
                                   plain=data["ser_train_plain"], log=jsonl_logger(loss_log))
    except ModeError as exc:
        raise ConfigError(str(exc)) from None
    scfg = cfg.stage1 if stage == 1 else cfg.stage2
    ckpt.extra["label"] = label
    ckpt.extra["lambda_ser"] = scfg.lambda_ser
    name = f"{label}-step{ckpt.extra['steps']}.ckpt"
    digest = write_once(cfg.paths.checkpoint_dir / name, ckpt.to_bytes())
    manifest = {"kind": "train", "stage": stage, "mode": mode.value, "label": label,
                "config_hash": label.rsplit("-", 1)[1], "config": cfg.to_dict(),
                "init": None if init is None else {"path": str(init), "sha256": init_sha},
                "teacher": {"path": teacher_path(cfg).name, "sha256": sha256_file(teacher_path(cfg))},
                "artifacts": {"checkpoint": {"path": name, "sha256": digest},
                              "losses": {"path": "losses.jsonl"}},
                "summary": {k: v for k, v in ckpt.extra.items() if k != "label"},
                "tool_version": __version__, "started": started, "finished": _now()}
    write_json_atomic(mpath, manifest)
    return manifest


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

SUITES = ("ser", "agreement", "response", "winrate")


def _ckpt_info(path: Path) -> tuple[Checkpoint, dict]:
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    ck = Checkpoint.load(path)
    info = {"name": path.name, "sha256": sha256_file(path), "stage": ck.stage, "mode": ck.mode,
            "label": ck.extra.get("label", path.stem), "lambda_ser": ck.extra.get("lambda_ser")}
    return ck, info


def cmd_eval(cfg: RunConfig, suite: str, checkpoints: list[Path], log: Callable[[str], None] = print) -> Path:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}")
    need = 2 if suite == "winrate" else 1
    if len(checkpoints) != need:
        raise ConfigError(f"suite {suite} takes {need} checkpoint(s), got {len(checkpoints)}")
    loaded = [_ckpt_info(Path(p)) for p in checkpoints]
    models = [model_from_checkpoint(ck) for ck, _ in loaded]
    teacher = load_teacher(cfg)
    vocab = teacher.vocab
    report: dict = {"suite": suite, "checkpoints": [info for _, info in loaded], "tool_version": __version__}
    if suite == "ser":
        test = load_corpora(cfg, ("ser_test",))["ser_test"]
        rep, outputs = eval_ser(models[0], test, vocab)
        report["result"] = rep.to_dict()
        report["outputs"] = [{"id": s.id, "emotion": s.emotion.value, "output": o} for s, o in zip(test, outputs)]
    elif suite == "agreement":
        test = load_corpora(cfg, ("asr_test",))["asr_test"]
        report["result"] = eval_agreement(models[0], teacher, test).to_dict()
    else:
        test = load_corpora(cfg, ("ser_test",))["ser_test"]
        backend = make_backend(cfg.judge)
        workers = cfg.judge.max_concurrency if cfg.judge.kind == "remote_chat" else 1
        report["judge"] = {k: v for k, v in cfg.judge.to_dict().items() if k != "api_key_env"}
        if suite == "response":
            report["result"] = response_suite(models[0], test[: cfg.eval["n_response"]], vocab, backend, workers)
        else:
            b = models[0] if loaded[0][1]["sha256"] == loaded[1][1]["sha256"] else models[1]
            report["result"] = winrate_suite(models[0], b, test[: cfg.eval["n_winrate"]], vocab, backend, workers)
    stems = "-vs-".join(Path(p).stem for p in checkpoints)
    path = cfg.paths.run_dir / "reports" / f"{suite}-{stems}.json"
    write_once(path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    log(f"wrote {path}")
    return path
