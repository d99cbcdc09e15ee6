import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emo_align import numerics as N
from emo_align.datagen.templates import Layout
from emo_align.model import (
    AdapterConfig,
    Checkpoint,
    CheckpointError,
    EmoAlignModel,
    PLoRAConfig,
    model_from_checkpoint,
    model_to_checkpoint,
    tiny_config,
)


def triple_ceil(L):
    return math.ceil(math.ceil(math.ceil(L / 2) / 2) / 2)


@pytest.fixture(scope="module")
def model():
    return EmoAlignModel(tiny_config(), seed=0)


def text_layout(ids, loss_start=None):
    ids = np.asarray(ids, dtype=np.int64)
    return Layout(ids, np.zeros(len(ids), dtype=bool), len(ids) if loss_start is None else loss_start)


def base_copy(m):
    """Same LM weights, no LoRA tensors at all."""
    base = EmoAlignModel(m.cfg, store=N.ParameterStore())
    for name, t in m.store.items():
        if ".lora." not in name:
            base.store.add(name, t.data.copy(), trainable=False)
    return base


# --- speech encoder --------------------------------------------------------

def test_encoder_preserves_length(model):
    frames = np.random.default_rng(0).normal(size=(40, model.cfg.d_audio))
    h, lengths = model.encode_speech([frames])
    assert h.shape == (1, 40, model.cfg.d_enc)
    assert lengths.tolist() == [40]


def test_encoder_is_deterministic(model):
    frames = np.random.default_rng(1).normal(size=(12, model.cfg.d_audio))
    a, _ = model.encode_speech([frames])
    b, _ = model.encode_speech([frames])
    np.testing.assert_array_equal(a.data, b.data)


def test_zeroed_encoder_is_linear_map():
    m = EmoAlignModel(tiny_config(), seed=3)
    s = m.store
    for pat in ("encoder.conv.*", "encoder.blocks.*.attn.o.*", "encoder.blocks.*.mlp.fc2.*"):
        for name in s.names(pat):
            s[name].data[...] = 0.0
    frames = np.random.default_rng(2).normal(size=(9, m.cfg.d_audio))
    h, _ = m.encode_speech([frames])
    expected = frames @ s["encoder.in_proj.weight"].data + s["encoder.in_proj.bias"].data
    np.testing.assert_allclose(h.data[0], expected, atol=1e-12)


def test_encoder_rejects_empty(model):
    with pytest.raises(ValueError):
        model.encode_speech([np.zeros((0, model.cfg.d_audio))])


# --- adapter -------------------------------------------------------------

@pytest.mark.parametrize("L,expected", [(100, 13), (8, 1), (16, 2)])
def test_adapter_length_examples(model, L, expected):
    h = N.Tensor(np.random.default_rng(L).normal(size=(1, L, model.cfg.d_enc)))
    out, lengths = model.adapt(h, np.array([L]))
    assert out.shape == (1, expected, model.cfg.d_lm)
    assert lengths.tolist() == [expected]


@given(st.integers(1, 4096))
def test_adapter_length_formula(L):
    assert AdapterConfig().out_length(L) == triple_ceil(L)


def test_adapter_batch_padding_is_ignored(model):
    rng = np.random.default_rng(4)
    short = rng.normal(size=(10, model.cfg.d_audio))
    long = rng.normal(size=(23, model.cfg.d_audio))
    alone, _ = model.speech_embeddings([short])
    batch, lengths = model.speech_embeddings([short, long])
    assert lengths.tolist() == [triple_ceil(10), triple_ceil(23)]
    np.testing.assert_allclose(batch.data[0, : lengths[0]], alone.data[0], atol=1e-12)


# --- assembly --------------------------------------------------------------

def test_text_only_mask(model):
    asm = model.assemble([text_layout([1, 2, 3, 4])])
    assert not asm.speech_mask.any()


def test_speech_slot_arithmetic(model):
    ids = np.concatenate([np.arange(1, 8), np.zeros(13, dtype=np.int64), np.arange(8, 21)])
    flags = np.zeros(33, dtype=bool)
    flags[7:20] = True
    lay = Layout(ids, flags, 26)
    speech = N.Tensor(np.random.default_rng(5).normal(size=(1, 13, model.cfg.d_lm)))
    asm = model.assemble([lay], speech, np.array([13]))
    assert asm.embeddings.shape[1] == 33
    assert int(asm.speech_mask.sum()) == 13
    np.testing.assert_array_equal(asm.embeddings.data[0, 7:20], speech.data[0])
    # a 7-token continuation: targets at positions 25..31 predict tokens 26..32, the last position
    covered = np.flatnonzero(asm.loss_mask[0])
    assert covered.tolist() == list(range(25, 32))
    assert covered[-1] + 1 == 33 - 1


def test_assemble_rejects_missing_speech(model):
    lay = Layout(np.zeros(3, dtype=np.int64), np.array([False, True, False]), 3)
    with pytest.raises(ValueError):
        model.assemble([lay])


def test_assemble_rejects_length_mismatch(model):
    lay = Layout(np.zeros(4, dtype=np.int64), np.array([False, True, True, False]), 4)
    speech = N.Tensor(np.zeros((1, 3, model.cfg.d_lm)))
    with pytest.raises(ValueError):
        model.assemble([lay], speech, np.array([3]))


# --- PLoRA ---------------------------------------------------------------

def randomize_lora(m, seed):
    rng = np.random.default_rng(seed)
    for name in m.store.names("*.lora.*"):
        m.store[name].data = rng.normal(size=m.store[name].data.shape)


def test_all_text_ignores_lora():
    m = EmoAlignModel(tiny_config(), seed=6)
    randomize_lora(m, 7)
    base = base_copy(m)
    rng = np.random.default_rng(8)
    for _ in range(20):
        lay = text_layout(rng.integers(0, m.cfg.vocab_size, size=rng.integers(1, 20)))
        a = m.assemble([lay])
        b = base.assemble([lay])
        np.testing.assert_array_equal(m.lm_forward(a.embeddings, a.speech_mask).data,
                                      base.lm_forward(b.embeddings, b.speech_mask).data)


def test_lora_changes_speech_positions():
    m = EmoAlignModel(tiny_config(), seed=6)
    base = base_copy(m)
    emb = N.Tensor(np.random.default_rng(9).normal(size=(1, 6, m.cfg.d_lm)))
    mask = np.array([[0, 1, 1, 0, 0, 0]], dtype=float)
    np.testing.assert_array_equal(m.lm_forward(emb, mask).data, base.lm_forward(emb, mask).data)
    randomize_lora(m, 10)
    out = m.lm_forward(emb, mask).data
    ref = base.lm_forward(emb, mask).data
    np.testing.assert_array_equal(out[0, 0], ref[0, 0])  # causal: before any speech
    assert not np.allclose(out[0, 1:], ref[0, 1:])


def test_lora_config_validation():
    with pytest.raises(ValueError):
        PLoRAConfig(rank=0)
    with pytest.raises(ValueError):
        PLoRAConfig(targets=("gate",))
    assert PLoRAConfig().scaling == 1.0


def test_single_position_logits(model):
    asm = model.assemble([text_layout([1])])
    assert model.lm_forward(asm.embeddings, asm.speech_mask).shape == (1, 1, model.cfg.vocab_size)


# --- SER head ----------------------------------------------------------------

def test_classify_single_position_is_identity_pooling(model):
    x = np.random.default_rng(11).normal(size=(1, 1, model.cfg.d_lm))
    out = np.exp(model.classify_emotion(N.Tensor(x), np.array([1])).data)
    w, b = model.store["ser_head.weight"].data, model.store["ser_head.bias"].data
    z = x[0, 0] @ w + b
    np.testing.assert_allclose(out[0], np.exp(z) / np.exp(z).sum(), atol=1e-12)


def test_classify_zero_weights_is_uniform():
    m = EmoAlignModel(tiny_config(), seed=0)
    m.store["ser_head.weight"].data[...] = 0
    x = np.random.default_rng(12).normal(size=(2, 5, m.cfg.d_lm))
    out = np.exp(m.classify_emotion(N.Tensor(x), np.array([5, 3])).data)
    np.testing.assert_allclose(out, np.full((2, 5), 0.2), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31))
def test_classify_permutation_invariant(L, seed):
    m = EmoAlignModel(tiny_config(), seed=1)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, L, m.cfg.d_lm))
    perm = rng.permutation(L)
    a = np.exp(m.classify_emotion(N.Tensor(x), np.array([L])).data)
    b = np.exp(m.classify_emotion(N.Tensor(x[:, perm]), np.array([L])).data)
    assert a.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(a, b, atol=1e-12)


# --- generation ------------------------------------------------------------

def test_greedy_generation_deterministic(model):
    lay = text_layout([1, 2, 3])
    assert model.generate(lay, max_new=6) == model.generate(lay, max_new=6)


def test_max_new_one(model):
    assert len(model.generate(text_layout([1, 2]), max_new=1)) == 1


def test_sampled_generation_seeded(model):
    lay = text_layout([1, 5])
    a = model.generate(lay, max_new=8, mode="sampled", seed=4)
    b = model.generate(lay, max_new=8, mode="sampled", seed=4)
    assert a == b


def test_generation_stops_at_eos(model):
    out = model.generate(text_layout([1, 2]), max_new=30, allowed=np.array([0]))
    assert out == [0]


def test_generate_rejects_zero_budget(model):
    with pytest.raises(ValueError):
        model.generate(text_layout([1]), max_new=0)


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, model):
    randomize_lora(model, 13)
    ck = model_to_checkpoint(model, "stage1", "stage1_only", seed=5, extra={"steps": 3})
    path = tmp_path / "m.ckpt"
    digest = ck.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.sha256() == digest
    assert (loaded.stage, loaded.mode, loaded.seed, loaded.extra) == ("stage1", "stage1_only", 5, {"steps": 3})
    m2 = model_from_checkpoint(loaded)
    frames = np.random.default_rng(14).normal(size=(17, model.cfg.d_audio))
    ns = triple_ceil(17)
    lay = Layout(np.array([1, 2] + [0] * ns + [3], dtype=np.int64),
                 np.array([False, False] + [True] * ns + [False]), ns + 3)
    a, *_ = model.forward_layouts([lay], [frames])
    b, *_ = m2.forward_layouts([lay], [frames])
    np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_float32_roundtrip():
    m = EmoAlignModel(tiny_config(dtype="float32"), seed=2)
    ck = Checkpoint.from_bytes(model_to_checkpoint(m, "stage1").to_bytes())
    for name, arr in m.store.state_dict().items():
        assert ck.tensors[name].dtype == np.float32
        np.testing.assert_array_equal(ck.tensors[name], arr)


def test_checkpoint_rejects_corruption(model):
    raw = model_to_checkpoint(model, "stage1").to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(raw + b"\0")


def test_checkpoint_rejects_truncation(model):
    raw = model_to_checkpoint(model, "stage1").to_bytes()
    for cut in (5, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(raw[:cut])


def test_checkpoint_header_layout(model):
    raw = model_to_checkpoint(model, "stage2", "blsp_emo").to_bytes()
    assert raw[:8] == b"EMOALIGN"
    assert int.from_bytes(raw[8:12], "little") == 1
    mlen = int.from_bytes(raw[12:16], "little")
    meta = json.loads(raw[16 : 16 + mlen])
    assert meta["stage"] == "stage2" and meta["mode"] == "blsp_emo"
    assert int.from_bytes(raw[16 + mlen : 20 + mlen], "little") == len(model.store)
