"""CKP1 parameter container: model config plus every parameter and buffer keyed by layer path."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .layers import Module
from .models import build_model

MAGIC = b"CKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Module, cfg: ModelConfig, meta: dict | None = None) -> None:
    """Layout (little-endian): magic, u32 version, u32 json length, json metadata,
    u32 entry count, then per entry: u32 key length, key utf-8, u32 ndim,
    u32 dims, float64 values in row-major order."""
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(state))]
    for key in sorted(state):
        arr = np.ascontiguousarray(state[key], dtype="<f8")
        kb = key.encode("utf-8")
        parts += [struct.pack("<I", len(kb)), kb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CKP1 checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", raw, off)
            key = raw[off + 4:off + 4 + klen].decode("utf-8")
            off += 4 + klen
            (ndim,) = struct.unpack_from("<I", raw, off)
            dims = struct.unpack_from(f"<{ndim}I", raw, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            state[key] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).copy()
            off += 8 * n
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, state


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[Module, ModelConfig, dict]:
    """Rebuild the model from the stored (or given) config and load its state."""
    header, state = read_checkpoint(path)
    stored = ModelConfig.from_dict(header["config"])
    if cfg is None:
        cfg = stored
    model = build_model(cfg)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not fit config {cfg.name!r}: {exc}") from exc
    model.eval()
    return model, cfg, header.get("meta", {})
