import numpy as np
import pytest

from conftest import GOLDEN
from emo_align.datagen.corpus import (
    MAX_ATTEMPTS,
    MAX_NEW,
    ConstructionError,
    Sample,
    construct_all,
    construct_continuation,
    construct_emotion_continuation,
    filter_short,
    gen_corpus,
    read_corpus,
    write_corpus,
)
from emo_align.datagen.templates import TemplateError, get_template
from emo_align.datagen.vocab import EMOTIONS, EOS, EmotionLabel
from emo_align.datagen.world import SyntheticWorldConfig, World, linear_probe_accuracy, lossless_world

X = "w00 w01 w02 w03 w04"


def golden(name):
    return (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")


# --- templates ---------------------------------------------------------------

@pytest.mark.parametrize("template_id,golden_name,values", [
    ("continuation", "continuation", {"transcript": X}),
    ("emotion_continuation", "emotion_continuation", {"transcript": X, "emotion": "sad"}),
    ("emotion_training", "emotion_training", {"continuation": "sad w05 w06 w07"}),
    ("ser", "ser_transcript", {"content": X}),
    ("ser", "ser_speech", {"content": "<speech>"}),
    ("cascaded_response", "cascaded_response", {"transcript": X, "emotion": "angry"}),
])
def test_prompt_matches_golden(template_id, golden_name, values):
    assert get_template(template_id).render(**values) == golden(golden_name)


def test_render_rejects_unbound_and_unknown_slots():
    t = get_template("emotion_continuation")
    with pytest.raises(TemplateError):
        t.render(transcript=X)
    with pytest.raises(TemplateError):
        t.render(transcript=X, emotion="sad", speech="x")


def test_layout_needs_exactly_one_content_source(world):
    t = get_template("continuation")
    with pytest.raises(TemplateError):
        t.layout(world.vocab)
    with pytest.raises(TemplateError):
        t.layout(world.vocab, transcript=[17] * 5, n_speech=3)


def test_extract_inverts_render():
    t = get_template("emotion_continuation")
    assert t.extract(golden("emotion_continuation")) == {"emotion": "sad", "transcript": X}
    assert t.extract("something else") is None


def test_speech_prompt_embeds_speech_not_transcript(world):
    lay = get_template("emotion_training").layout(world.vocab, n_speech=6, continuation=[20, EOS])
    assert lay.n_speech == 6
    assert not set(lay.ids[lay.speech].tolist()) - {0}


# --- filter ------------------------------------------------------------------

@pytest.mark.parametrize("n,ok", [(4, False), (5, True), (0, False), (12, True)])
def test_filter_short(n, ok):
    assert filter_short(list(range(17, 17 + n))) is ok


# --- world ---------------------------------------------------------------------

def test_render_length(world):
    x = world.sample_sentence(np.random.default_rng(0), 10)
    assert world.render_speech(x, EmotionLabel.SAD, seed=[1]).shape == (40, 16)


def test_render_seeded(world):
    x = world.sample_sentence(np.random.default_rng(1), 6)
    a = world.render_speech(x, EmotionLabel.HAPPY, seed=[7])
    np.testing.assert_array_equal(a, world.render_speech(x, EmotionLabel.HAPPY, seed=[7]))
    assert not np.array_equal(a, world.render_speech(x, EmotionLabel.HAPPY, seed=[8]))


def test_noiseless_render_ignores_emotion_without_offset():
    w = World.build(SyntheticWorldConfig(noise=0.0, emotion_scale=0.0))
    x = w.sample_sentence(np.random.default_rng(2), 7)
    np.testing.assert_array_equal(w.render_speech(x, EmotionLabel.SAD, seed=[1]),
                                  w.render_speech(x, EmotionLabel.ANGRY, seed=[2]))


def test_render_rejects_empty(world):
    with pytest.raises(ValueError):
        world.render_speech([], EmotionLabel.NEUTRAL, seed=[0])


def test_lossless_frames_are_one_hot_rows():
    w = World.build(lossless_world())
    x = w.sample_sentence(np.random.default_rng(3), 5)
    f = w.render_speech(x, EmotionLabel.SAD, seed=[0])
    assert f.shape == (40, 64)
    np.testing.assert_array_equal(f.argmax(axis=1), np.repeat(x, 8))


def test_world_config_validation():
    for bad in ({"vocab_size": 4}, {"frames_per_token": 0}, {"noise": -1.0}, {"min_len": 3}):
        with pytest.raises(ValueError):
            SyntheticWorldConfig(**bad)


def test_emotion_linearly_recoverable(world):
    assert linear_probe_accuracy(world) >= 0.99


def test_rule_continuations(world):
    x = world.sample_sentence(np.random.default_rng(4), 6)
    y = world.continuation(x)
    assert y[-1] == EOS and len(y) == 4
    assert y[1] == world.succ(x[-1]) and y[2] == world.succ(y[1])
    ye = world.emotion_continuation(x, EmotionLabel.SAD)
    assert ye[0] == world.vocab.emotion_id(EmotionLabel.SAD) and ye[1:] == y
    assert world.emotion_continuation(x, EmotionLabel.NEUTRAL) == y


# --- teacher ---------------------------------------------------------------------

def test_teacher_deterministic(world, small_teacher):
    from conftest import small_model_config
    from emo_align.datagen.teacher import TeacherTrainConfig, build_teacher

    again = build_teacher(world, small_model_config(), TeacherTrainConfig(steps=60, batch_size=16, warmup=5))
    for name, t in small_teacher.model.store.items():
        np.testing.assert_array_equal(t.data, again.model.store[name].data)


def test_teacher_without_conditioning_ignores_emotion(world, small_teacher):
    plain = small_teacher.without_emotion()
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = world.sample_sentence(rng)
        outs = {tuple(plain.generate("emotion_continuation", x, e, max_new=8)) for e in EMOTIONS}
        assert len(outs) == 1


# --- corpora ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def ser_small(world, small_teacher):
    return gen_corpus("ser", world, small_teacher, 25, "train")


def test_ser_corpus_balanced(ser_small):
    counts = {e: sum(s.emotion is e for s in ser_small) for e in EMOTIONS}
    assert set(counts.values()) == {5}


def test_transcripts_pass_filter(ser_small, world):
    for s in ser_small:
        assert filter_short(s.tokens)
        assert world.cfg.min_len <= len(s.tokens) <= world.cfg.max_len
        assert s.frames.shape == (4 * len(s.tokens), 16)


def test_corpus_deterministic_and_worker_independent(world, small_teacher, ser_small):
    again = gen_corpus("ser", world, small_teacher, 25, "train", workers=3)
    assert [s.tokens for s in again] == [s.tokens for s in ser_small]
    for a, b in zip(again, ser_small):
        np.testing.assert_array_equal(a.frames, b.frames)


def test_continuations(ser_small, small_teacher):
    done = construct_all(ser_small[:5], small_teacher, emotion=False)
    again = construct_all(ser_small[:5], small_teacher, emotion=False, workers=2)
    for s, t in zip(done, again):
        assert s.continuation == t.continuation
        assert 2 <= len(s.continuation) <= MAX_NEW and s.continuation[-1] == EOS
        assert s.continuation.count(EOS) == 1


def test_emotion_continuation_records_label(ser_small, small_teacher):
    s = construct_emotion_continuation(ser_small[2], small_teacher)
    assert s.emotion is ser_small[2].emotion and s.continuation[-1] == EOS


def test_emotion_continuation_needs_label(ser_small, small_teacher):
    with pytest.raises(ValueError):
        construct_emotion_continuation(Sample("x", "asr", ser_small[0].tokens, ser_small[0].frames), small_teacher)


class _ImmediateEos:
    """Stands in for a teacher that always ends at once."""

    def __init__(self, world):
        self.world = world
        self.calls = 0

    def generate(self, *args, **kwargs):
        self.calls += 1
        return [EOS]


def test_fallback_gives_up_after_five_attempts(world, ser_small):
    t = _ImmediateEos(world)
    with pytest.raises(ConstructionError):
        construct_continuation(ser_small[0], t)
    assert t.calls == 1 + MAX_ATTEMPTS


class _EosThenWords(_ImmediateEos):
    def generate(self, *args, **kwargs):
        self.calls += 1
        return [EOS] if self.calls < 3 else [20, 21, EOS]


def test_fallback_recovers(world, ser_small):
    t = _EosThenWords(world)
    assert construct_continuation(ser_small[0], t).continuation == [20, 21, EOS]
    assert t.calls == 3


def test_corpus_file_roundtrip(tmp_path, ser_small, small_teacher):
    samples = construct_all(ser_small[:6], small_teacher, emotion=True)
    jsonl, speech = write_corpus(tmp_path / "ser", samples)
    raw = speech.read_bytes()
    back = read_corpus(tmp_path / "ser")
    for a, b in zip(samples, back):
        assert (a.id, a.kind, a.tokens, a.emotion, a.continuation) == (b.id, b.kind, b.tokens, b.emotion, b.continuation)
        assert b.frames.dtype == np.float32
        np.testing.assert_array_equal(a.frames, b.frames)
    write_corpus(tmp_path / "again", samples)
    assert (tmp_path / "again.speech").read_bytes() == raw
    assert (tmp_path / "again.jsonl").read_bytes() == jsonl.read_bytes()
