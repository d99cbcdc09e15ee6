"""Hand-set student that inverts lossless speech exactly.

With one-hot audio embeddings, eight frames per token, no noise and no
emotion offset, the frames are the one-hot token rows repeated. The encoder
is set to pass them through unchanged and each adapter output position reads
the centre tap of its window, which lands on the first frame of token ``j``.
The first convolution maps the one-hot row to the token's LM embedding; a
large bias keeps the GELUs between convolutions in their linear regime and
the last convolution removes it. The bottleneck branch is zeroed.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..datagen.teacher import TeacherLM
from ..model.network import EmoAlignModel
from .train import build_student

SHIFT = 20.0


def lossless_student(teacher: TeacherLM) -> EmoAlignModel:
    world = teacher.world
    wc = world.cfg
    if not (wc.one_hot_audio and wc.noise == 0 and wc.emotion_scale == 0 and wc.frames_per_token == 8):
        raise ValueError("the lossless student needs the lossless world (one-hot audio, 8 frames, no noise/offset)")
    V = teacher.model.cfg.vocab_size
    a = teacher.model.cfg.adapter
    if (a.n_conv_layers, a.kernel, a.stride, a.padding) != (3, 5, 2, 2):
        raise ValueError("the lossless student needs the default adapter geometry")
    t64 = teacher.astype("float64")
    model = build_student(t64, seed=0, cfg=replace(t64.model.cfg, d_audio=V, d_enc=V))
    s = model.store

    def put(name, arr):
        s[name].data = np.asarray(arr, dtype=np.float64).reshape(s[name].data.shape)

    put("encoder.in_proj.weight", np.eye(V))
    put("encoder.in_proj.bias", np.zeros(V))
    for name in s.names("encoder.conv.*"):
        put(name, np.zeros(s[name].data.shape))
    for pat in ("encoder.blocks.*.attn.o.*", "encoder.blocks.*.mlp.fc2.*"):
        for name in s.names(pat):
            put(name, np.zeros(s[name].data.shape))

    E = s["lm.tok_emb.weight"].data          # [V, D]
    D = E.shape[1]
    c = a.kernel // 2
    w0 = np.zeros((D, V, a.kernel))
    w0[:, :, c] = E.T
    put("adapter.conv.0.weight", w0)
    put("adapter.conv.0.bias", np.full(D, SHIFT))
    for i in range(1, a.n_conv_layers):
        w = np.zeros((D, D, a.kernel))
        w[:, :, c] = np.eye(D)
        put(f"adapter.conv.{i}.weight", w)
        put(f"adapter.conv.{i}.bias", np.full(D, -SHIFT if i == a.n_conv_layers - 1 else 0.0))
    put("adapter.bottleneck.up.weight", np.zeros(s["adapter.bottleneck.up.weight"].data.shape))
    put("adapter.bottleneck.up.bias", np.zeros(D))
    return model
