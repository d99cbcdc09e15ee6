"""Two-stage training driver."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .. import numerics as N
from ..datagen.corpus import Sample
from ..datagen.teacher import TeacherLM
from ..model.checkpoint import Checkpoint, model_to_checkpoint
from ..model.config import ModelConfig
from ..model.network import EmoAlignModel
from .config import FreezeSpec, ModeError, StageConfig, TrainMode, requires_init, trainable_params
from .losses import (
    continuation_loss,
    emotion_continuation_loss,
    semantic_loss,
    ser_loss,
    ser_prompt_targets,
    speech_forward,
    teacher_targets,
)


@dataclass
class LossReport:
    stage: int
    mode: str
    step: int
    epoch: int
    total: float
    lr: float
    wall_clock: float
    semantic_kl: float | None = None
    continuation_ce: float | None = None
    ser_ce: float | None = None

    def __post_init__(self):
        for k in ("total", "semantic_kl", "continuation_ce", "ser_ce"):
            v = getattr(self, k)
            if v is not None and not math.isfinite(v):
                raise N.NonFiniteError(f"non-finite {k} at step {self.step}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def jsonl_logger(path) -> Callable[[LossReport], None]:
    """Append each report as one JSON line, flushing after every write."""

    def log(rep: LossReport) -> None:
        with open(path, "a", encoding="utf-8") as f:
            f.write(rep.to_json() + "\n")

    return log


def build_student(teacher: TeacherLM, seed: int, cfg: ModelConfig | None = None) -> EmoAlignModel:
    """Fresh encoder, adapter, LoRA and SER head around a copy of the teacher LM.

    ``cfg`` may change the speech-side sizes; the LM fields must match the teacher.
    """
    cfg = cfg or teacher.model.cfg
    model = EmoAlignModel(cfg, seed=seed, components=("lora", "encoder", "adapter", "ser_head"))
    for name, t in teacher.model.store.items():
        model.store.add(name, t.data.copy(), trainable=False)
    return model


def _total_steps(n: int, cfg: StageConfig) -> int:
    steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    return steps if cfg.max_steps is None else min(steps, cfg.max_steps)


def _run(model: EmoAlignModel, n: int, cfg: StageConfig, step_fn, stage: int, mode: TrainMode,
         log: Callable[[LossReport], None] | None) -> int:
    """Shuffled minibatch loop shared by both stages; returns the number of steps taken."""
    store = model.store
    opt = N.OptimizerState(N.AdamWConfig(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay))
    total_steps = _total_steps(n, cfg)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 303, epoch]).permutation(n)
        for i in range(0, n, cfg.batch_size):
            if step >= total_steps:
                return step
            idx = order[i : i + cfg.batch_size]
            store.zero_grad()
            total, parts = step_fn(idx)
            total.backward()
            N.clip_grad_norm(store, cfg.grad_clip)
            lr = N.lr_schedule(step, total_steps, cfg.lr, cfg.warmup_steps)
            N.adamw_step(store, opt, lr=lr)
            if log is not None:
                log(LossReport(stage, mode.value, step, epoch, float(total.data), lr,
                               time.perf_counter() - t0, **parts))
            step += 1
    return step


def heldout_kl(model: EmoAlignModel, teacher: TeacherLM, samples: Sequence[Sample],
               probs: Sequence[np.ndarray] | None = None, batch_size: int = 64) -> float:
    """Mean per-token KL (teacher text path || student speech path) over ``samples``."""
    probs = teacher_targets(teacher, samples) if probs is None else probs
    total, count = 0.0, 0
    with N.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            cross, ent = semantic_loss(model, chunk, probs[i : i + batch_size], teacher.vocab)
            total += (float(cross.data) - ent) * len(chunk)
            count += len(chunk)
    return total / count


def train_stage1(teacher: TeacherLM, samples: Sequence[Sample], cfg: StageConfig,
                 heldout: Sequence[Sample] | None = None,
                 log: Callable[[LossReport], None] | None = None) -> tuple[EmoAlignModel, Checkpoint]:
    """Semantic alignment: KL distillation from the text path into the adapter."""
    if not samples:
        raise ValueError("stage 1 needs a non-empty dataset")
    if any(s.continuation is None for s in samples):
        raise ValueError("stage 1 samples need teacher continuations")
    model = build_student(teacher, cfg.seed)
    model.store.set_trainable(trainable_params(1, TrainMode.STAGE1_ONLY))
    probs = teacher_targets(teacher, samples)
    vocab = teacher.vocab
    extra = {}
    if heldout:
        held_probs = teacher_targets(teacher, heldout)
        extra["heldout_kl_initial"] = heldout_kl(model, teacher, heldout, held_probs)

    def step_fn(idx):
        batch = [samples[i] for i in idx]
        cross, ent = semantic_loss(model, batch, [probs[i] for i in idx], vocab)
        return cross, {"semantic_kl": float(cross.data) - ent}

    steps = _run(model, len(samples), cfg, step_fn, 1, TrainMode.STAGE1_ONLY, log)
    model.store.set_trainable(lambda n: False)
    if heldout:
        extra["heldout_kl_final"] = heldout_kl(model, teacher, heldout, held_probs)
    extra["steps"] = steps
    ckpt = model_to_checkpoint(model, "stage1", TrainMode.STAGE1_ONLY.value, cfg.seed, extra,
                               {"stage": cfg.to_dict()})
    return model, ckpt


def train_stage2(teacher: TeacherLM, samples: Sequence[Sample], cfg: StageConfig, mode: TrainMode | str,
                 init: Checkpoint | None = None, plain: Sequence[Sample] | None = None,
                 log: Callable[[LossReport], None] | None = None) -> tuple[EmoAlignModel, Checkpoint]:
    """Emotion alignment on SER data.

    ``samples`` carry emotion-aware continuations. ``blsp_multitask`` also
    needs ``plain``: the same samples with emotion-agnostic continuations.
    """
    mode = TrainMode(mode)
    spec = trainable_params(2, mode)
    if cfg.lambda_ser == 0:  # the head is outside the objective; keep weight decay off it too
        spec = FreezeSpec(tuple(p for p in spec.patterns if p != "ser_head.*"))
    if requires_init(mode) and init is None:
        raise ModeError(f"mode {mode.value} needs a stage-1 checkpoint")
    if mode is TrainMode.EMO_NO_PRETRAIN and init is not None:
        raise ModeError("emo_no_pretrain starts without a stage-1 checkpoint")
    if not samples:
        raise ValueError("stage 2 needs a non-empty dataset")
    if any(s.emotion is None for s in samples):
        raise ValueError("stage 2 samples need emotion labels")
    if mode is TrainMode.BLSP_MULTITASK:
        if plain is None or [s.id for s in plain] != [s.id for s in samples]:
            raise ValueError("blsp_multitask needs plain continuations aligned with the samples")
    elif mode is not TrainMode.BLSP_SER and any(s.continuation is None for s in samples):
        raise ValueError("stage 2 samples need emotion-aware continuations")

    model = build_student(teacher, cfg.seed)
    if init is not None:
        if init.stage != "stage1":
            raise ModeError(f"init checkpoint has stage {init.stage!r}, expected 'stage1'")
        model.store.load_state_dict(init.tensors)
    model.store.set_trainable(spec)
    vocab = teacher.vocab
    lc, ls = cfg.lambda_cont, cfg.lambda_ser

    def step_fn(idx):
        batch = [samples[i] for i in idx]
        labels = [s.emotion for s in batch]
        speech, slen = speech_forward(model, batch)
        if mode is TrainMode.BLSP_SER:
            ser = continuation_loss(model, "ser", vocab, ser_prompt_targets(vocab, labels), speech, slen)
            return N.mul(ser, ls), {"ser_ce": float(ser.data)}
        if mode is TrainMode.BLSP_MULTITASK:
            cont = continuation_loss(model, "continuation", vocab, [plain[i].continuation for i in idx],
                                     speech, slen)
            ser = continuation_loss(model, "ser", vocab, ser_prompt_targets(vocab, labels), speech, slen)
        else:
            cont = emotion_continuation_loss(model, batch, vocab, (speech, slen))
            ser = ser_loss(model, speech, slen, labels)
        total = N.add(N.mul(cont, lc), N.mul(ser, ls))
        return total, {"continuation_ce": float(cont.data), "ser_ce": float(ser.data)}

    steps = _run(model, len(samples), cfg, step_fn, 2, mode, log)
    model.store.set_trainable(lambda n: False)
    extra = {"steps": steps, "init_sha256": init.sha256() if init is not None else None}
    ckpt = model_to_checkpoint(model, "stage2", mode.value, cfg.seed, extra, {"stage": cfg.to_dict()})
    return model, ckpt
