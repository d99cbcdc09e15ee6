"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

Criteria 5-8 and the reference half of 10 drive the command layer at the
reference configuration: teacher, corpora, stage 1 and five stage-2 runs.
Expect about twenty minutes on one core. Set EMO_ALIGN_ACCEPTANCE_DIR to keep
the work directory between sessions; finished runs are then reused, because
the commands skip work whose manifest and checkpoint already exist.
"""

import json
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, GOLDEN
from emo_align import numerics as N
from emo_align.alignment import (
    build_student,
    emotion_continuation_loss,
    heldout_kl,
    semantic_loss,
    ser_loss,
    speech_forward,
    teacher_targets,
    trainable_params,
)
from emo_align.alignment.oracle import lossless_student
from emo_align.cli import cmd_datagen, cmd_eval, cmd_train, load_teacher, parse_config, with_stage
from emo_align.datagen import World, get_template, lossless_world
from emo_align.datagen.corpus import construct_all, gen_corpus
from emo_align.datagen.teacher import TeacherLM
from emo_align.datagen.templates import Layout
from emo_align.evaluation import OfflineHeuristicJudge, judge_winrate, render_judge_prompt
from emo_align.model import Checkpoint, EmoAlignModel, ModelConfig, model_from_checkpoint
from emo_align.numerics.registry import OPS

REPO = Path(__file__).resolve().parents[1]


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def check(n: int, ok: bool, detail: str) -> None:
    record(n, ok, detail)
    assert ok, detail


def make_config(work: Path):
    doc = json.loads((REPO / "configs" / "reference.json").read_text())
    doc["paths"] = {"corpus_dir": "corpus", "checkpoint_dir": "checkpoints", "run_dir": "runs"}
    return parse_config(doc, work)


def quiet(_msg):
    pass


def train(cfg, stage, mode=None, init=None):
    """Returns (checkpoint path, wall seconds); seconds is None when the run was reused."""
    label_dir = cfg.paths.run_dir
    before = set(label_dir.glob("*/manifest.json")) if label_dir.exists() else set()
    t0 = time.perf_counter()
    m = cmd_train(cfg, stage, mode, init, log=quiet)
    elapsed = time.perf_counter() - t0
    fresh = (label_dir / m["label"] / "manifest.json") not in before
    return cfg.paths.checkpoint_dir / m["artifacts"]["checkpoint"]["path"], (elapsed if fresh else None)


def evaluate(cfg, suite, ckpt):
    return json.loads(cmd_eval(cfg, suite, [ckpt], log=quiet).read_text())


@pytest.fixture(scope="module")
def ref(tmp_path_factory):
    """Reference pipeline: datagen, stage 1, and every stage-2 variant, with eval reports."""
    work = Path(os.environ.get("EMO_ALIGN_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("reference"))
    cfg = make_config(work)
    for d in (cfg.paths.corpus_dir, cfg.paths.checkpoint_dir, cfg.paths.run_dir):
        d.mkdir(parents=True, exist_ok=True)
    if not (cfg.paths.corpus_dir / "manifest.json").exists():
        cmd_datagen(cfg, log=quiet)
    out = {"cfg": cfg, "time": {}, "ckpt": {}, "ser": {}, "agree": {}}
    s1, out["time"]["stage1"] = train(cfg, 1)
    out["ckpt"]["stage1"] = s1
    runs = {
        "blsp_emo": (cfg, "blsp_emo", s1),
        "blsp_ser": (cfg, "blsp_ser", s1),
        "blsp_multitask": (cfg, "blsp_multitask", s1),
        "emo_no_pretrain": (cfg, "emo_no_pretrain", None),
        "lambda_ser_0": (with_stage(cfg, 2, lambda_ser=0.0), "blsp_emo", s1),
    }
    for key, (c, mode, init) in runs.items():
        out["ckpt"][key], out["time"][key] = train(c, 2, mode, init)
    for key, path in out["ckpt"].items():
        out["ser"][key] = evaluate(cfg, "ser", path)["result"]
        out["agree"][key] = evaluate(cfg, "agreement", path)["result"]
    return out


# --- 1 -------------------------------------------------------------------------------------

def test_criterion_1_numerics_soundness(small_teacher, world):
    t0 = time.perf_counter()
    errors = {}
    for name in sorted(OPS):
        store, f = OPS[name](np.random.default_rng(0))
        errors[name] = N.gradient_check(f, store)

    # composite: the stage-1 KL term and the stage-2 objective through the whole student. These sum
    # hundreds of terms, so below a 1e-5 step the central difference is dominated by roundoff.
    samples = construct_all(gen_corpus("ser", world, small_teacher, 2, "probe"), small_teacher, emotion=True)
    model = build_student(small_teacher, 4)
    for n in model.store.names("*.lora.up"):
        model.store[n].data = np.random.default_rng(5).normal(0, 0.1, size=model.store[n].data.shape)
    probs = teacher_targets(small_teacher, samples)
    model.store.set_trainable(trainable_params(1, "stage1_only"))
    errors["stage1_loss"] = N.gradient_check(
        lambda: semantic_loss(model, samples, probs, small_teacher.vocab)[0], model.store, eps=1e-5, max_entries=300)
    model.store.set_trainable(trainable_params(2, "blsp_emo"))
    labels = [s.emotion for s in samples]

    def stage2():
        speech, slen = speech_forward(model, samples)
        cont = emotion_continuation_loss(model, samples, small_teacher.vocab, (speech, slen))
        return N.add(cont, ser_loss(model, speech, slen, labels))

    errors["stage2_loss"] = N.gradient_check(stage2, model.store, eps=1e-5, max_entries=400)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    check(1, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


# --- 2 -------------------------------------------------------------------------------------

def test_criterion_2_adapter_arithmetic():
    cfg = ModelConfig()
    a = cfg.adapter
    assert (a.n_conv_layers, a.kernel, a.stride, a.padding) == (3, 5, 2, 2)
    model = EmoAlignModel(cfg, seed=0, components=("adapter",))
    rng = np.random.default_rng(0)
    bad = []
    for L in range(1, 4097):
        expected = math.ceil(math.ceil(math.ceil(L / 2) / 2) / 2)
        hidden = N.Tensor(rng.normal(size=(1, L, cfg.d_enc)))
        with N.no_grad():
            out, lengths = model.adapt(hidden, np.array([L]))
        if not (out.shape[1] == lengths[0] == a.out_length(L) == expected):
            bad.append(L)
        if L % 8 == 0 and expected * 8 != L:
            bad.append(L)
    check(2, not bad, f"L in [1, 4096]: {4096 - len(bad)}/4096 lengths correct, L/8 exact on multiples of 8")


# --- 3 -------------------------------------------------------------------------------------

def _base_copy(m):
    base = EmoAlignModel(m.cfg, store=N.ParameterStore())
    for name, t in m.store.items():
        if ".lora." not in name:
            base.store.add(name, t.data.copy(), trainable=False)
    return base


def test_criterion_3_plora_selectivity():
    cfg = ModelConfig()
    fresh = EmoAlignModel(cfg, seed=1)
    base = _base_copy(fresh)
    rng = np.random.default_rng(2)

    # zero-initialized up-projection: mixed sequences identical at step 0
    mixed_same = 0
    for _ in range(20):
        n = int(rng.integers(2, 30))
        emb = N.Tensor(rng.normal(size=(1, n, cfg.d_lm)).astype(np.float32))
        mask = (rng.random((1, n)) < 0.5).astype(float)
        with N.no_grad():
            mixed_same += np.array_equal(fresh.lm_forward(emb, mask).data, base.lm_forward(emb, mask).data)

    # arbitrary nonzero LoRA weights: all-text sequences identical
    for name in fresh.store.names("*.lora.*"):
        t = fresh.store[name]
        t.data = rng.normal(size=t.data.shape).astype(t.data.dtype)
    text_same = 0
    for _ in range(100):
        ids = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 40)))
        lay = Layout(ids, np.zeros(len(ids), dtype=bool), len(ids))
        a, b = fresh.assemble([lay]), base.assemble([lay])
        with N.no_grad():
            text_same += np.array_equal(fresh.lm_forward(a.embeddings, a.speech_mask).data,
                                        base.lm_forward(b.embeddings, b.speech_mask).data)
    check(3, text_same == 100 and mixed_same == 20,
          f"{text_same}/100 all-text sequences bit-identical, {mixed_same}/20 mixed sequences at step 0")


# --- 4 -------------------------------------------------------------------------------------

def test_criterion_4_freeze_contracts(ref):
    cfg = ref["cfg"]
    teacher = load_teacher(cfg)
    init = build_student(teacher, cfg.stage1.seed)
    s1 = model_from_checkpoint(Checkpoint.load(ref["ckpt"]["stage1"]))
    s2 = model_from_checkpoint(Checkpoint.load(ref["ckpt"]["blsp_emo"]))
    base = [n for n in s1.store.names("lm.*") if ".lora." not in n]
    stage1_ok = (s1.store.checksum("encoder.*") == init.store.checksum("encoder.*")
                 and s1.store.checksum("lm.*") == init.store.checksum("lm.*")
                 and s1.store.checksum("adapter.*") != init.store.checksum("adapter.*"))
    base_ok = all(np.array_equal(s1.store[n].data, s2.store[n].data) for n in base)
    changed = {p: s2.store.checksum(p) != s1.store.checksum(p)
               for p in ("lm.*.lora.*", "encoder.*", "adapter.*", "ser_head.*")}
    ok = stage1_ok and base_ok and all(changed.values())
    check(4, ok, f"stage1 encoder/LM unchanged={stage1_ok}; stage2 LM base unchanged={base_ok}, "
                 f"changed={changed}")


# --- 5 -------------------------------------------------------------------------------------

def test_criterion_5_semantic_alignment(ref):
    agree = ref["agree"]["stage1"]
    secs = ref["time"]["stage1"]
    teacher = load_teacher(ref["cfg"])
    lw = World.build(lossless_world())
    lossless_teacher = TeacherLM(teacher.model, lw)
    samples = construct_all(gen_corpus("asr", lw, lossless_teacher, 20, "test"), lossless_teacher, emotion=False)
    oracle_kl = heldout_kl(lossless_student(lossless_teacher), lossless_teacher.astype("float64"), samples)
    time_ok = secs is None or secs < 600
    ok = agree["mean_kl"] < 0.05 and agree["match_rate"] >= 0.95 and oracle_kl < 1e-6 and time_ok
    shown = "reused" if secs is None else f"{secs:.0f}s"
    check(5, ok, f"held-out KL {agree['mean_kl']:.4f} (< 0.05), agreement {agree['match_rate']:.3f} (>= 0.95), "
                 f"lossless oracle KL {oracle_kl:.2e} (< 1e-6), stage-1 wall time {shown} (< 600s)")


# --- 6 -------------------------------------------------------------------------------------

def test_criterion_6_emotion_alignment(ref):
    acc = ref["ser"]["blsp_emo"]["accuracy"]
    secs = ref["time"]["blsp_emo"]
    ok = acc >= 0.90 and (secs is None or secs < 900)
    shown = "reused" if secs is None else f"{secs:.0f}s"
    check(6, ok, f"blsp_emo SER accuracy {acc:.3f} (>= 0.90), stage-2 wall time {shown} (< 900s)")


# --- 7 -------------------------------------------------------------------------------------

def test_criterion_7_ser_only_tradeoff(ref):
    ce = {k: ref["agree"][k]["continuation_ce"] for k in ("stage1", "blsp_ser", "blsp_emo")}
    ser_acc = ref["ser"]["blsp_ser"]["accuracy"]
    d_ser = ce["blsp_ser"] - ce["stage1"]
    d_emo = ce["blsp_emo"] - ce["stage1"]
    ok = ser_acc >= 0.90 and d_ser >= 1.0 and d_emo <= 0.2
    check(7, ok, f"blsp_ser SER {ser_acc:.3f} (>= 0.90), CE rise {d_ser:.3f} (>= 1.0); "
                 f"blsp_emo CE rise {d_emo:.3f} (<= 0.2)")


# --- 8 -------------------------------------------------------------------------------------

def test_criterion_8_ablations(ref):
    ser = {k: ref["ser"][k]["accuracy"] for k in ("blsp_emo", "emo_no_pretrain", "lambda_ser_0")}
    agree = {k: ref["agree"][k]["match_rate"] for k in ("blsp_emo", "emo_no_pretrain")}
    no_pre = ser["emo_no_pretrain"] < ser["blsp_emo"] and agree["emo_no_pretrain"] < agree["blsp_emo"]
    completed = ref["ckpt"]["lambda_ser_0"].exists()
    no_ser = completed and ser["lambda_ser_0"] < ser["blsp_emo"]
    check(8, no_pre and no_ser,
          f"emo_no_pretrain SER {ser['emo_no_pretrain']:.3f} vs {ser['blsp_emo']:.3f}, agreement "
          f"{agree['emo_no_pretrain']:.3f} vs {agree['blsp_emo']:.3f} -> {'ok' if no_pre else 'not lower'}; "
          f"lambda_ser=0 completed={completed}, SER {ser['lambda_ser_0']:.3f} vs {ser['blsp_emo']:.3f} -> "
          f"{'lower' if no_ser else 'not lower'}")


# --- 9 -------------------------------------------------------------------------------------

X = "w00 w01 w02 w03 w04"
GOLDEN_RENDERS = [
    ("continuation", "continuation", {"transcript": X}),
    ("emotion_continuation", "emotion_continuation", {"transcript": X, "emotion": "sad"}),
    ("emotion_training", "emotion_training", {"continuation": "sad w05 w06 w07"}),
    ("ser", "ser_transcript", {"content": X}),
    ("ser", "ser_speech", {"content": "<speech>"}),
    ("cascaded_response", "cascaded_response", {"transcript": X, "emotion": "angry"}),
]


def test_criterion_9_judge_harness():
    def same(text, name):
        return text == (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")

    matches = sum(same(get_template(t).render(**v), name) for t, name, v in GOLDEN_RENDERS)
    f = dict(instruction="Plan my week.", emotion="sad", response="I am sorry you feel sad. Here is a plan.")
    matches += sum(same(render_judge_prompt(f"judge_{k}", **f), f"judge_{k}") for k in ("quality", "empathy"))
    matches += same(render_judge_prompt("judge_winrate", text_u1="u one", text_a1="a one", text_u2="u two",
                                        text_a2="a two", text_u3="u three", emotion="happy",
                                        response_a="first reply", response_b="second reply"), "judge_winrate")
    n_prompts = len(GOLDEN_RENDERS) + 3
    judge = OfflineHeuristicJudge()
    history = ["u one", "a one", "u two", "a two", "u three"]
    responses = ["I am so sorry you feel sad, here is a plan.", "Here is a plan.", "ok", "That sounds hard. Rest."]
    ties = sum(judge_winrate(history, "sad", r, r, judge).choice == "tie" for r in responses)
    inverted = 0
    pairs = [(a, b) for a in responses for b in responses if a != b]
    for a, b in pairs:
        ab = judge_winrate(history, "sad", a, b, judge).choice
        ba = judge_winrate(history, "sad", b, a, judge).choice
        inverted += {"A": "B", "B": "A", "tie": "tie"}[ab] == ba
    ok = matches == n_prompts and ties == len(responses) and inverted == len(pairs)
    check(9, ok, f"{matches}/{n_prompts} prompts byte-identical to goldens, "
                 f"{ties}/{len(responses)} identical pairs tie, {inverted}/{len(pairs)} swaps invert")


# --- 10 ------------------------------------------------------------------------------------

def _smoke_pipeline(work: Path) -> dict[str, bytes]:
    doc = json.loads((REPO / "configs" / "smoke.json").read_text())
    doc["paths"] = {"corpus_dir": "corpus", "checkpoint_dir": "checkpoints", "run_dir": "runs"}
    cfg = parse_config(doc, work)
    for d in (cfg.paths.corpus_dir, cfg.paths.checkpoint_dir, cfg.paths.run_dir):
        d.mkdir(parents=True, exist_ok=True)
    cmd_datagen(cfg, log=quiet)
    s1, _ = train(cfg, 1)
    s2, _ = train(cfg, 2, "blsp_emo", s1)
    for suite in ("ser", "agreement", "response"):
        cmd_eval(cfg, suite, [s2], log=quiet)
    cmd_eval(cfg, "winrate", [s1, s2], log=quiet)
    files = {}
    for sub in (cfg.paths.checkpoint_dir, cfg.paths.run_dir / "reports", cfg.paths.corpus_dir):
        for p in sorted(sub.iterdir()):
            if p.suffix != ".json" or sub.name == "reports":
                files[f"{sub.name}/{p.name}"] = p.read_bytes()
    return files


def test_criterion_10_determinism(ref, tmp_path):
    a = _smoke_pipeline(tmp_path / "a")
    b = _smoke_pipeline(tmp_path / "b")
    smoke_ok = a.keys() == b.keys() and all(a[k] == b[k] for k in a)

    # reference scale: retrain stage 1 and blsp_emo from the same corpora in a fresh directory
    cfg = ref["cfg"]
    rerun = parse_config({**cfg.to_dict(), "paths": {"corpus_dir": str(cfg.paths.corpus_dir),
                                                      "checkpoint_dir": "checkpoints", "run_dir": "runs"}},
                         tmp_path / "ref")
    rerun.paths.checkpoint_dir.mkdir(parents=True)
    rerun.paths.run_dir.mkdir(parents=True)
    teacher = cfg.paths.checkpoint_dir / f"teacher-{cfg.teacher_hash}.ckpt"
    shutil.copyfile(teacher, rerun.paths.checkpoint_dir / teacher.name)
    s1, _ = train(rerun, 1)
    s2, _ = train(rerun, 2, "blsp_emo", s1)
    same_ckpt = (s1.read_bytes() == ref["ckpt"]["stage1"].read_bytes()
                 and s2.read_bytes() == ref["ckpt"]["blsp_emo"].read_bytes())
    r1 = cmd_eval(rerun, "ser", [s2], log=quiet).read_bytes()
    r0 = (cfg.paths.run_dir / "reports" / f"ser-{ref['ckpt']['blsp_emo'].stem}.json").read_bytes()
    ok = smoke_ok and same_ckpt and r1 == r0
    check(10, ok, f"smoke pipeline rerun: {sum(a[k] == b.get(k) for k in a)}/{len(a)} artifacts identical; "
                  f"reference stage1+stage2 checkpoints identical={same_ckpt}, SER report identical={r1 == r0}")
