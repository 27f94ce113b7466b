"""Binary checkpoints: parameters, BN statistics and Adam state.

Layout (little-endian)::

    b"CMPN" | u32 version | u32 n | n bytes of JSON config record | u32 tensor count
    per tensor: u16 name length | name utf-8 | u8 dtype tag | u8 rank | u32 extents... | payload

The JSON record holds the network config, the train config (if any) and
the Adam step counter.  Tensor names are prefixed ``param/``, ``buffer/``,
``adam_m/`` or ``adam_v/``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import NetworkConfig, build_model
from .train import OptimState, TrainConfig

MAGIC = b"CMPN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net_config: NetworkConfig
    tensors: dict[str, np.ndarray]
    train_config: TrainConfig | None = None
    step: int = 0


def _tag(arr: np.ndarray) -> int:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt:
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def encode(ckpt: Checkpoint) -> bytes:
    record = {
        "network": ckpt.net_config.to_dict(),
        "train": ckpt.train_config.to_dict() if ckpt.train_config is not None else None,
        "step": ckpt.step,
    }
    meta = json.dumps(record, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        tag = _tag(arr)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


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


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a CompNet checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        record = json.loads(r.take(meta_len).decode("utf-8"))
        net = NetworkConfig.from_dict(record["network"])
        train_cfg = TrainConfig.from_dict(record["train"]) if record["train"] is not None else None
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad config record: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return Checkpoint(net, tensors, train_cfg, int(record["step"]))


def from_model(model, state: OptimState | None = None, train_config: TrainConfig | None = None) -> Checkpoint:
    tensors = {f"param/{n}": p.data for n, p in model.named_parameters()}
    tensors.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    if state is not None:
        for n in state.m:
            tensors[f"adam_m/{n}"] = state.m[n]
            tensors[f"adam_v/{n}"] = state.v[n]
    return Checkpoint(model.config, tensors, train_config, state.t if state is not None else 0)


def save_checkpoint(path, model, state: OptimState | None = None, train_config: TrainConfig | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode(from_model(model, state, train_config)))
    return path


def restore_into(model, ckpt: Checkpoint) -> OptimState:
    """Copy checkpoint tensors into ``model``; the configs must match."""
    if ckpt.net_config != model.config:
        raise CheckpointError(f"checkpoint config {ckpt.net_config} does not match model config {model.config}")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    state = OptimState(t=ckpt.step)
    expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n in buffers}
    missing = expected - set(ckpt.tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}")
    for key, arr in ckpt.tensors.items():
        kind, name = key.split("/", 1)
        target = params[name].data if kind == "param" and name in params else buffers.get(name) if kind == "buffer" else None
        if kind in ("adam_m", "adam_v"):
            if name not in params or arr.shape != params[name].shape:
                raise CheckpointError(f"optimizer entry {key} does not match the model")
            (state.m if kind == "adam_m" else state.v)[name] = arr.copy()
            continue
        if target is None:
            raise CheckpointError(f"unexpected tensor {key}")
        if target.shape != arr.shape or target.dtype != arr.dtype:
            raise CheckpointError(f"{key}: stored {arr.dtype}{arr.shape}, model has {target.dtype}{target.shape}")
        target[...] = arr
    return state


def load_checkpoint(path, model=None):
    """Return ``(model, optimizer state, checkpoint)``.

    Without ``model`` a fresh one is built from the stored config; with one,
    a config mismatch is rejected.
    """
    ckpt = decode(Path(path).read_bytes())
    if model is None:
        dtype = ckpt.tensors[next(k for k in ckpt.tensors if k.startswith("param/"))].dtype
        model = build_model(ckpt.net_config, dtype=dtype)
    state = restore_into(model, ckpt)
    return model, state, ckpt
