"""Binary checkpoint format.

Layout (all integers little-endian):

    bytes 0..4   magic b"XABR"
    u32          format version (currently 1)
    u32          metadata length, then that many bytes of UTF-8 JSON
    u32          tensor count
    per tensor:  u16 name length, name (UTF-8), u8 dtype tag
                 (0 = f32, 1 = f64), u8 trainable flag, u8 rank,
                 rank x u64 dims, raw C-order payload

The metadata block records the model kind ("stack" or "combined"), the
config snapshot needed to rebuild it, and the optimizer step. Optimizer
moments ride along as tensors named ``opt.m.<param>`` / ``opt.v.<param>``.
Loading stages the entire file before touching any model, so a malformed
checkpoint never yields a partially-initialized model.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .bridge import BridgeConfig
from .combined import CombinedModel
from .errors import CheckpointFormatError
from .transformer import StackConfig, TransformerStack

MAGIC = b"XABR"
VERSION = 1

_DTYPE_BY_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def parameter_checksum(params) -> str:
    """sha256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        arr = getattr(arr, "data", arr)
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- writing -------------------------------------------------------------


def _model_meta(model) -> dict:
    if isinstance(model, CombinedModel):
        return {"kind": "combined",
                "donor_config": model.donor.config.to_dict(),
                "receiver_config": model.receiver.config.to_dict(),
                "bridge_config": model.bridge_config.to_dict(),
                "vocab_out": model.receiver.vocab_out}
    if isinstance(model, TransformerStack):
        return {"kind": "stack",
                "config": model.config.to_dict(),
                "vocab_out": model.vocab_out}
    raise TypeError(f"cannot checkpoint object of type {type(model).__name__}")


def _pack_tensor(name: str, arr: np.ndarray, trainable: bool) -> bytes:
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name!r}")
    try:
        tag = _TAG_BY_DTYPE[arr.dtype]
    except KeyError:
        raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name}")
    parts = [struct.pack("<H", len(name_b)), name_b,
             struct.pack("<BBB", tag, int(trainable), arr.ndim)]
    for dim in arr.shape:
        parts.append(struct.pack("<Q", dim))
    parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                  copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(path: str, model, optimizer=None, step: int | None = None,
                    extra_meta: dict | None = None) -> None:
    """Serialize model (and optionally optimizer moments) to ``path``.

    The write goes through a temporary file and an atomic rename.
    """
    meta = _model_meta(model)
    if optimizer is not None:
        meta["step"] = optimizer.t
    if step is not None:
        meta["step"] = step
    if extra_meta:
        meta["extra"] = extra_meta

    records: list[tuple[str, np.ndarray, bool]] = []
    for name, p in model.parameters().items():
        records.append((name, p.data, p.requires_grad))
    if optimizer is not None:
        for name, arr in optimizer.state_arrays().items():
            records.append((name, arr, False))

    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = [MAGIC, struct.pack("<I", VERSION),
            struct.pack("<I", len(meta_b)), meta_b,
            struct.pack("<I", len(records))]
    for name, arr, trainable in records:
        blob.append(_pack_tensor(name, arr, trainable))

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(blob))
    os.replace(tmp, path)


# -- reading -------------------------------------------------------------


class _Cursor:
    """Bounds-checked reader over the file bytes; errors carry offsets."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at "
                f"offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


@dataclass
class LoadedCheckpoint:
    """Fully staged checkpoint contents."""

    meta: dict
    arrays: dict[str, np.ndarray]
    trainable: dict[str, bool]

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("opt.")}

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("opt.")}


def read_checkpoint(path: str) -> LoadedCheckpoint:
    """Parse and validate the container without building a model."""
    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(
            f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version = cur.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version} at offset 4")
    meta_len = cur.u32("metadata length")
    meta_b = cur.take(meta_len, "metadata")
    try:
        meta = json.loads(meta_b.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata block: {exc}")
    count = cur.u32("tensor count")

    arrays: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    for i in range(count):
        at = cur.pos
        name_len = cur.u16(f"tensor {i} name length")
        name = cur.take(name_len, f"tensor {i} name").decode("utf-8")
        tag = cur.u8(f"{name} dtype tag")
        if tag not in _DTYPE_BY_TAG:
            raise CheckpointFormatError(
                f"unknown dtype tag {tag} for tensor {name} at offset {at}")
        flag = cur.u8(f"{name} trainable flag")
        rank = cur.u8(f"{name} rank")
        dims = tuple(cur.u64(f"{name} dim {d}") for d in range(rank))
        dtype = _DTYPE_BY_TAG[tag]
        n_items = 1
        for d in dims:
            n_items *= d
        payload = cur.take(n_items * dtype.itemsize, f"{name} payload")
        if name in arrays:
            raise CheckpointFormatError(f"duplicate tensor name {name}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        trainable[name] = bool(flag)
    if cur.pos != len(buf):
        raise CheckpointFormatError(
            f"{len(buf) - cur.pos} trailing bytes at offset {cur.pos}")
    return LoadedCheckpoint(meta=meta, arrays=arrays, trainable=trainable)


def _build_model(meta: dict):
    kind = meta.get("kind")
    if kind == "stack":
        cfg = StackConfig(**meta["config"])
        model = TransformerStack(cfg, seed=0)
        if meta["vocab_out"] != cfg.vocab_size:
            model.replace_head(meta["vocab_out"], seed=0)
        return model
    if kind == "combined":
        donor = TransformerStack(StackConfig(**meta["donor_config"]), seed=0)
        receiver = TransformerStack(StackConfig(**meta["receiver_config"]), seed=0)
        b = dict(meta["bridge_config"])
        bridge_cfg = BridgeConfig(placement=tuple(b["placement"]),
                                  d_adapter=b["d_adapter"],
                                  n_bridge_heads=b["n_bridge_heads"],
                                  gate_bias_init=b["gate_bias_init"])
        return CombinedModel(donor, receiver, bridge_cfg,
                             vocab_out=meta["vocab_out"], seed=0)
    raise CheckpointFormatError(f"unknown model kind {kind!r} in metadata")


def load_checkpoint(path: str):
    """Rebuild the model from ``path``.

    Returns (model, LoadedCheckpoint). Tensor names must match the model's
    parameter set exactly (after setting optimizer arrays aside) or the
    load fails without producing a model.
    """
    staged = read_checkpoint(path)
    try:
        model = _build_model(staged.meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"metadata does not describe a model: {exc}")
    params = model.parameters()
    saved = staged.model_arrays()
    unknown = sorted(set(saved) - set(params))
    if unknown:
        raise CheckpointFormatError(f"unknown tensor name {unknown[0]} in checkpoint")
    missing = sorted(set(params) - set(saved))
    if missing:
        raise CheckpointFormatError(f"checkpoint missing tensor {missing[0]}")
    for name, p in params.items():
        arr = saved[name]
        if arr.shape != p.data.shape:
            raise CheckpointFormatError(
                f"tensor {name} has shape {arr.shape}, model expects {p.data.shape}")
        p.data = arr.copy()
        p.grad = None
        p.requires_grad = staged.trainable[name]
    return model, staged
