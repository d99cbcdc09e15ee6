"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic "EMOALIGN"
    u32       format version
    u32       metadata length, then that many bytes of UTF-8 JSON
    u32       record count, then per record:
                u16 name length, UTF-8 name
                u8  dtype code (0 float32, 1 float64, 2 int64)
                u8  rank, then rank x u32 dims
                raw little-endian element data
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import ParameterStore
from .config import ModelConfig
from .network import EmoAlignModel

MAGIC = b"EMOALIGN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    stage: str = "init"
    mode: str = "none"
    config: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def metadata(self) -> dict:
        return {"stage": self.stage, "mode": self.mode, "config": self.config,
                "seed": self.seed, "extra": self.extra}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            code = _CODES[arr.dtype]
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<BB", code, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        try:
            return cls._parse(raw)
        except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc!r}") from None

    @classmethod
    def _parse(cls, raw: bytes) -> "Checkpoint":
        view = memoryview(raw)
        if bytes(view[:8]) != MAGIC:
            raise CheckpointError("bad magic")
        pos = 8
        (version,) = struct.unpack_from("<I", view, pos)
        pos += 4
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        meta = json.loads(bytes(view[pos : pos + mlen]).decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            n = int(np.prod(dims)) if rank else 1
            if pos + n * dt.itemsize > len(raw):
                raise CheckpointError(f"truncated record {name!r}")
            arr = np.frombuffer(view, dtype=dt, count=n, offset=pos).reshape(dims)
            pos += n * dt.itemsize
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
        if pos != len(raw):
            raise CheckpointError("trailing bytes after last record")
        return cls(tensors, meta["stage"], meta["mode"], meta["config"], meta["seed"],
                   meta.get("extra", {}), version)

    def save(self, path: str | os.PathLike) -> str:
        """Write atomically; returns the SHA-256 of the file contents."""
        path = Path(path)
        raw = self.to_bytes()
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(raw)
        os.replace(tmp, path)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def model_to_checkpoint(model, stage: str, mode: str = "none", seed: int = 0, extra: dict | None = None,
                        config: dict | None = None) -> Checkpoint:
    cfg = {"model": model.cfg.to_dict()}
    if config:
        cfg.update(config)
    return Checkpoint(model.store.state_dict(), stage, mode, cfg, seed, dict(extra or {}))


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild an :class:`EmoAlignModel` holding exactly the checkpoint's tensors."""
    cfg = ModelConfig.from_dict(ckpt.config["model"])
    store = ParameterStore()
    for name, arr in ckpt.tensors.items():
        store.add(name, arr.copy(), trainable=False)
    return EmoAlignModel(cfg, store=store)
