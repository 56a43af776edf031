"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    b"CTRLP1"                      magic, 6 bytes
    u32 version
    u32 n, n bytes                 UTF-8 key=value config text
    u32 tensor count
      per tensor: u32 name length, name bytes, u32 rank, u32 extents..., f32 values
    u8 normalizer mode (0 per-feature, 1 per-sample), f32[input_len] mean, f32[input_len] std
    u64 training step

Config lines without a dot describe the model; ``run.<key>`` lines carry the
resolved run configuration for provenance and are not needed to rebuild.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .data import NORM_MODES, Normalizer
from .model import ModelConfig, ModelNet, build_model

MAGIC = b"CTRLP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ModelNet, normalizer: Normalizer | None, path, step: int = 0,
                    run_config: dict | None = None) -> None:
    cfg = model.config
    normalizer = normalizer or Normalizer.identity(cfg.input_len)
    if len(normalizer.mean) != cfg.input_len:
        raise CheckpointError("normalizer width does not match the model input length")

    text = cfg.to_text()
    for key, value in (run_config or {}).items():
        text += f"run.{key}={value}\n"
    blob = text.encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<B", NORM_MODES.index(normalizer.mode)))
    buf.write(np.asarray(normalizer.mean, dtype="<f4").tobytes())
    buf.write(np.asarray(normalizer.std, dtype="<f4").tobytes())
    buf.write(struct.pack("<Q", step))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into its raw parts without building a model."""
    try:
        r = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    text = r.take(n).decode("utf-8")
    model_keys, run_keys = {}, {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, value = line.split("=", 1)
        if key.startswith("run."):
            run_keys[key[4:]] = value
        else:
            model_keys[key] = value
    config = ModelConfig.from_mapping(model_keys)

    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        tensors[name] = r.floats(int(np.prod(shape))).reshape(shape)

    (mode,) = r.unpack("<B")
    if mode >= len(NORM_MODES):
        raise CheckpointError(f"bad normalizer mode {mode}")
    mean = r.floats(config.input_len).astype(np.float64)
    std = r.floats(config.input_len).astype(np.float64)
    (step,) = r.unpack("<Q")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint")
    return {
        "config": config,
        "run_config": run_keys,
        "tensors": tensors,
        "normalizer": Normalizer(mean, std, NORM_MODES[mode]),
        "step": step,
    }


def load_checkpoint(path) -> tuple[ModelNet, Normalizer]:
    parts = read_checkpoint(path)
    model = build_model(parts["config"], init=False)
    extra = set(parts["tensors"]) - set(model.state_dict())
    if extra:
        raise CheckpointError(f"checkpoint has tensors unknown to its config: {sorted(extra)}")
    try:
        model.load_state(parts["tensors"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from None
    return model, parts["normalizer"]
