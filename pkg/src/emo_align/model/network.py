"""Speech encoder, modality adapter, decoder-only LM with Partial LoRA, SER head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numerics as N
from ..numerics import ParameterStore, Tensor
from ..datagen.templates import Layout
from ..datagen.vocab import EOS
from .config import ModelConfig

NEG_INF = -1e9


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _linear(store: ParameterStore, name: str, d_in: int, d_out: int, rng, dtype, std=None, zero=False):
    std = 1.0 / np.sqrt(d_in) if std is None else std
    w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, size=(d_in, d_out))
    store.add(f"{name}.weight", w.astype(dtype))
    store.add(f"{name}.bias", np.zeros(d_out, dtype=dtype))


def _ln(store: ParameterStore, name: str, d: int, dtype):
    store.add(f"{name}.weight", np.ones(d, dtype=dtype))
    store.add(f"{name}.bias", np.zeros(d, dtype=dtype))


def _block(store, prefix, d, mlp_mult, n_layers, rng, dtype):
    out_std = 1.0 / np.sqrt(d) / np.sqrt(2 * n_layers)
    _ln(store, f"{prefix}.ln1", d, dtype)
    for p in ("q", "k", "v"):
        _linear(store, f"{prefix}.attn.{p}", d, d, rng, dtype)
    _linear(store, f"{prefix}.attn.o", d, d, rng, dtype, std=out_std)
    _ln(store, f"{prefix}.ln2", d, dtype)
    _linear(store, f"{prefix}.mlp.fc1", d, mlp_mult * d, rng, dtype)
    _linear(store, f"{prefix}.mlp.fc2", mlp_mult * d, d, rng, dtype,
            std=1.0 / np.sqrt(mlp_mult * d) / np.sqrt(2 * n_layers))


def init_lm(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    dt = cfg.np_dtype
    d = cfg.d_lm
    store.add("lm.tok_emb.weight", rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)).astype(dt))
    store.add("lm.pos_emb.weight", rng.normal(0.0, 0.02, size=(cfg.max_positions, d)).astype(dt))
    for i in range(cfg.lm_layers):
        _block(store, f"lm.blocks.{i}", d, cfg.mlp_mult, cfg.lm_layers, rng, dt)
    _ln(store, "lm.ln_f", d, dt)
    _linear(store, "lm.head", d, cfg.vocab_size, rng, dt)


def init_lora(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    """Down-projection small random, up-projection zero."""
    dt = cfg.np_dtype
    d, r = cfg.d_lm, cfg.lora.rank
    for i in range(cfg.lm_layers):
        for p in cfg.lora.projections:
            base = f"lm.blocks.{i}.attn.{p}.lora"
            store.add(f"{base}.down", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r)).astype(dt))
            store.add(f"{base}.up", np.zeros((r, d), dtype=dt))


def init_encoder(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    dt = cfg.np_dtype
    d, k = cfg.d_enc, cfg.enc_conv_kernel
    _linear(store, "encoder.in_proj", cfg.d_audio, d, rng, dt)
    for i in range(cfg.enc_conv_layers):
        store.add(f"encoder.conv.{i}.weight", rng.normal(0.0, 1.0 / np.sqrt(d * k), size=(d, d, k)).astype(dt))
        store.add(f"encoder.conv.{i}.bias", np.zeros(d, dtype=dt))
    for i in range(cfg.enc_layers):
        _block(store, f"encoder.blocks.{i}", d, cfg.mlp_mult, cfg.enc_layers, rng, dt)


def init_adapter(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    dt = cfg.np_dtype
    a = cfg.adapter
    c_in = cfg.d_enc
    for i in range(a.n_conv_layers):
        c_out = a.output_dim
        std = 1.0 / np.sqrt(c_in * a.kernel)
        store.add(f"adapter.conv.{i}.weight", rng.normal(0.0, std, size=(c_out, c_in, a.kernel)).astype(dt))
        store.add(f"adapter.conv.{i}.bias", np.zeros(c_out, dtype=dt))
        c_in = c_out
    _linear(store, "adapter.bottleneck.down", a.output_dim, a.bottleneck_dim, rng, dt)
    _linear(store, "adapter.bottleneck.up", a.bottleneck_dim, a.output_dim, rng, dt,
            std=0.5 / np.sqrt(a.bottleneck_dim))


def init_ser_head(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    _linear(store, "ser_head", cfg.d_lm, cfg.n_emotions, rng, cfg.np_dtype)


# ---------------------------------------------------------------------------
# forward building blocks
# ---------------------------------------------------------------------------

def linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return N.add(N.matmul(x, store[f"{name}.weight"]), store[f"{name}.bias"])


def layer_norm(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return N.layer_norm(x, store[f"{name}.weight"], store[f"{name}.bias"])


def _projection(store, name, x, lora_gate, scaling):
    out = linear(store, name, x)
    if lora_gate is not None and f"{name}.lora.down" in store:
        delta = N.matmul(N.matmul(x, store[f"{name}.lora.down"]), store[f"{name}.lora.up"])
        out = N.add(out, N.mul(delta, lora_gate * scaling))
    return out


def attention(store, prefix, x: Tensor, bias: np.ndarray, n_heads: int, lora_gate=None, scaling=1.0) -> Tensor:
    B, T, D = x.shape
    dh = D // n_heads

    def heads(t):
        return N.transpose(N.reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_projection(store, f"{prefix}.q", x, lora_gate, scaling))
    k = heads(_projection(store, f"{prefix}.k", x, lora_gate, scaling))
    v = heads(_projection(store, f"{prefix}.v", x, lora_gate, scaling))
    scores = N.add(N.mul(N.matmul(q, N.transpose(k, (0, 1, 3, 2))), 1.0 / float(np.sqrt(dh))), bias)
    ctx = N.matmul(N.softmax(scores, axis=-1), v)
    ctx = N.reshape(N.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    return _projection(store, f"{prefix}.o", ctx, lora_gate, scaling)


def transformer_block(store, prefix, x, bias, n_heads, lora_gate=None, scaling=1.0):
    h = layer_norm(store, f"{prefix}.ln1", x)
    x = N.add(x, attention(store, f"{prefix}.attn", h, bias, n_heads, lora_gate, scaling))
    h = layer_norm(store, f"{prefix}.ln2", x)
    h = linear(store, f"{prefix}.mlp.fc2", N.gelu(linear(store, f"{prefix}.mlp.fc1", h)))
    return N.add(x, h)


def causal_bias(T: int, dtype) -> np.ndarray:
    return np.triu(np.full((T, T), NEG_INF, dtype=dtype), k=1)


def padding_bias(lengths: np.ndarray, T: int, dtype) -> np.ndarray:
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def length_mask(lengths: np.ndarray, T: int, dtype) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Assembled:
    """Batched LM input: embeddings plus per-position bookkeeping."""

    embeddings: Tensor          # [B, N, D]
    speech_mask: np.ndarray     # [B, N] 1.0 at speech positions
    ids: np.ndarray             # [B, N] token ids (placeholder 0 at speech/padding)
    lengths: np.ndarray         # [B]
    loss_mask: np.ndarray       # [B, N] 1.0 where the *target* at that position is a continuation token
    targets: np.ndarray         # [B, N] next-token targets (ids shifted left)


class EmoAlignModel:
    """Speech encoder (psi), adapter (theta), LM (phi + PLoRA), SER head (eta).

    All parameters live in one :class:`ParameterStore` under the name
    prefixes ``encoder.``, ``adapter.``, ``lm.`` and ``ser_head.``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParameterStore | None = None,
                 components: Sequence[str] = ("encoder", "adapter", "lm", "lora", "ser_head")):
        self.cfg = cfg
        self.components = tuple(components)
        if store is None:
            store = ParameterStore()
            rng = np.random.default_rng(seed)
            # fixed construction order keeps names and draws reproducible
            init = {"lm": init_lm, "lora": init_lora, "encoder": init_encoder,
                    "adapter": init_adapter, "ser_head": init_ser_head}
            for comp in ("lm", "lora", "encoder", "adapter", "ser_head"):
                sub = np.random.default_rng(rng.integers(2**63))
                if comp in self.components:
                    init[comp](store, cfg, sub)
        self.store = store

    @property
    def dtype(self):
        return self.cfg.np_dtype

    @property
    def has_lora(self) -> bool:
        return any(".lora." in n for n in self.store)

    # -- speech side ------------------------------------------------------
    def encode_speech(self, frames: np.ndarray | Sequence[np.ndarray], lengths=None) -> tuple[Tensor, np.ndarray]:
        """Frames [B, L, D_audio] (or a list of [L_i, D_audio]) -> hidden [B, L, D_enc]."""
        frames, lengths = self._pad_frames(frames, lengths)
        s, cfg = self.store, self.cfg
        B, L, _ = frames.shape
        mask = length_mask(lengths, L, self.dtype)[:, :, None]
        h = linear(s, "encoder.in_proj", Tensor(frames))
        k = cfg.enc_conv_kernel
        for i in range(cfg.enc_conv_layers):
            c = N.conv1d(N.transpose(N.mul(h, mask), (0, 2, 1)), s[f"encoder.conv.{i}.weight"],
                         s[f"encoder.conv.{i}.bias"], stride=1, padding=k // 2)
            h = N.add(h, N.gelu(N.transpose(c, (0, 2, 1))))
        bias = padding_bias(lengths, L, self.dtype)
        for i in range(cfg.enc_layers):
            h = transformer_block(s, f"encoder.blocks.{i}", h, bias, cfg.enc_heads)
        return h, lengths

    def adapt(self, hidden: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Encoder states [B, L, D_enc] -> LM-space speech embeddings [B, L', D_lm]."""
        s, a = self.store, self.cfg.adapter
        L = hidden.shape[1]
        x = N.transpose(N.mul(hidden, length_mask(lengths, L, self.dtype)[:, :, None]), (0, 2, 1))
        lengths = np.asarray(lengths)
        for i in range(a.n_conv_layers):
            x = N.conv1d(x, s[f"adapter.conv.{i}.weight"], s[f"adapter.conv.{i}.bias"],
                         stride=a.stride, padding=a.padding)
            lengths = (lengths + 2 * a.padding - a.kernel) // a.stride + 1
            if i < a.n_conv_layers - 1:
                x = N.gelu(x)
            x = N.mul(x, length_mask(lengths, x.shape[2], self.dtype)[:, None, :])
        x = N.transpose(x, (0, 2, 1))
        h = linear(s, "adapter.bottleneck.up", N.gelu(linear(s, "adapter.bottleneck.down", x)))
        return N.add(x, h), lengths

    def speech_embeddings(self, frames, lengths=None) -> tuple[Tensor, np.ndarray]:
        h, lengths = self.encode_speech(frames, lengths)
        return self.adapt(h, lengths)

    def classify_emotion(self, adapter_out: Tensor, lengths: np.ndarray) -> Tensor:
        """Masked mean pooling + linear; returns log-probabilities [B, n_emotions]."""
        Lp = adapter_out.shape[1]
        m = length_mask(lengths, Lp, self.dtype)
        w = m / m.sum(axis=1, keepdims=True)
        pooled = N.tsum(N.mul(adapter_out, w[:, :, None]), axis=1)
        return N.log_softmax(linear(self.store, "ser_head", pooled), axis=-1)

    # -- LM side ------------------------------------------------------------
    def assemble(self, layouts: Sequence[Layout], speech: Tensor | None = None,
                 speech_lengths: np.ndarray | None = None) -> Assembled:
        """Batch layouts into LM input embeddings, splicing speech where flagged."""
        B = len(layouts)
        lengths = np.array([lay.length for lay in layouts])
        T = int(lengths.max())
        ids = np.zeros((B, T), dtype=np.int64)
        smask = np.zeros((B, T), dtype=self.dtype)
        loss_mask = np.zeros((B, T), dtype=self.dtype)
        targets = np.zeros((B, T), dtype=np.int64)
        gather = None
        if speech is not None:
            Lmax = speech.shape[1]
            zero_row = B * Lmax
            gather = np.full((B, T), zero_row, dtype=np.int64)
        for b, lay in enumerate(layouts):
            n = lay.length
            ids[b, :n] = lay.ids
            smask[b, :n] = lay.speech
            targets[b, : n - 1] = lay.ids[1:]
            # target at position t is ids[t+1]; continuation tokens start at loss_start
            loss_mask[b, lay.loss_start - 1 : n - 1] = 1.0
            ns = lay.n_speech
            if ns:
                if speech is None:
                    raise ValueError("layout has speech positions but no speech embeddings given")
                if speech_lengths is not None and speech_lengths[b] != ns:
                    raise ValueError(f"sample {b}: layout expects {ns} speech frames, adapter gave {speech_lengths[b]}")
                gather[b, np.flatnonzero(lay.speech)] = b * Lmax + np.arange(ns)
        emb = N.embedding(self.store["lm.tok_emb.weight"], ids)
        if speech is not None and smask.any():
            D = speech.shape[2]
            flat = N.concat([N.reshape(speech, (-1, D)), Tensor(np.zeros((1, D), dtype=self.dtype))], axis=0)
            emb = N.add(N.mul(emb, (1.0 - smask)[:, :, None]), N.gather_rows(flat, gather))
        return Assembled(emb, smask, ids, lengths, loss_mask, targets)

    def lm_forward(self, embeddings: Tensor, speech_mask: np.ndarray | None = None) -> Tensor:
        """Causal LM over [B, N, D] embeddings -> logits [B, N, V].

        The LoRA delta is multiplied by ``speech_mask`` so text positions see
        exactly the base projections.
        """
        s, cfg = self.store, self.cfg
        B, T, _ = embeddings.shape
        if T > cfg.max_positions:
            raise ValueError(f"sequence of {T} exceeds max_positions={cfg.max_positions}")
        x = N.add(embeddings, N.getitem(s["lm.pos_emb.weight"], slice(0, T)))
        gate = None
        if speech_mask is not None and self.has_lora:
            gate = np.asarray(speech_mask, dtype=self.dtype)[:, :, None]
        bias = causal_bias(T, self.dtype)
        for i in range(cfg.lm_layers):
            x = transformer_block(s, f"lm.blocks.{i}", x, bias, cfg.lm_heads, gate, cfg.lora.scaling)
        x = layer_norm(s, "lm.ln_f", x)
        return linear(s, "lm.head", x)

    def forward_layouts(self, layouts: Sequence[Layout], frames=None, frame_lengths=None):
        """Full forward for a batch. Returns (log_probs [B,N,V], Assembled, speech, speech_lengths)."""
        speech = slen = None
        if frames is not None:
            speech, slen = self.speech_embeddings(frames, frame_lengths)
        asm = self.assemble(layouts, speech, slen)
        logits = self.lm_forward(asm.embeddings, asm.speech_mask)
        return N.log_softmax(logits, axis=-1), asm, speech, slen

    # -- decoding -------------------------------------------------------------
    def generate(self, layout: Layout, frames: np.ndarray | None = None, max_new: int = 32,
                 mode: str = "greedy", seed: int | None = None, temperature: float = 1.0,
                 allowed: np.ndarray | None = None) -> list[int]:
        """Decode after ``layout`` until end-of-sequence or ``max_new`` tokens.

        ``layout`` must not contain a continuation. Sampled mode draws from a
        generator seeded by ``seed``.
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if mode not in ("greedy", "sampled"):
            raise ValueError(f"unknown decoding mode {mode!r}")
        rng = np.random.default_rng(seed) if mode == "sampled" else None
        out: list[int] = []
        with N.no_grad():
            speech = slen = None
            if frames is not None:
                speech, slen = self.speech_embeddings([frames])
            ids, flags = list(layout.ids), list(layout.speech)
            for _ in range(max_new):
                lay = Layout(np.asarray(ids), np.asarray(flags, dtype=bool), len(ids))
                asm = self.assemble([lay], speech, slen)
                logits = self.lm_forward(asm.embeddings, asm.speech_mask).data[0, -1]
                tok = self._pick(logits, mode, rng, temperature, allowed)
                out.append(tok)
                if tok == EOS:
                    break
                ids.append(tok)
                flags.append(False)
        return out

    @staticmethod
    def _pick(logits: np.ndarray, mode, rng, temperature, allowed) -> int:
        logits = logits.astype(np.float64)
        if allowed is not None:
            masked = np.full_like(logits, -np.inf)
            masked[allowed] = logits[allowed]
            logits = masked
        if mode == "greedy":
            return int(np.argmax(logits))
        z = logits / temperature
        p = np.exp(z - z.max())
        p /= p.sum()
        return int(rng.choice(len(p), p=p))

    # -- helpers ---------------------------------------------------------------
    def _pad_frames(self, frames, lengths):
        if isinstance(frames, np.ndarray) and frames.ndim == 3:
            if lengths is None:
                lengths = np.full(frames.shape[0], frames.shape[1])
            return frames.astype(self.dtype, copy=False), np.asarray(lengths)
        seqs = [np.asarray(f, dtype=self.dtype) for f in frames]
        if any(len(f) == 0 for f in seqs):
            raise ValueError("empty speech input")
        lengths = np.array([len(f) for f in seqs])
        out = np.zeros((len(seqs), lengths.max(), seqs[0].shape[1]), dtype=self.dtype)
        for i, f in enumerate(seqs):
            out[i, : len(f)] = f
        return out, lengths
