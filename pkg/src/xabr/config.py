"""JSON run configuration.

Four sections with a fixed key set; anything unrecognized is an error
rather than silently ignored. Vocabulary size is not configurable: both
stacks share the byte tokenizer's 259 ids. Bridge placement and adapter
width default from the receiver geometry (a bridge after every receiver
layer, d_adapter = d_model/4).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .bridge import BridgeConfig
from .data import ByteTokenizer
from .errors import ConfigError
from .training import TrainConfig
from .transformer import StackConfig

_STACK_KEYS = ("n_layers", "d_model", "n_heads", "d_ff", "max_len")
_BRIDGE_KEYS = ("placement", "d_adapter", "n_bridge_heads", "gate_bias_init")
_TRAIN_KEYS = ("epochs", "batch_size", "lr_bridge", "lr_receiver",
               "weight_decay", "patience", "min_delta", "seed",
               "max_tokens", "val_fraction")

DEFAULTS = {
    "donor": {"n_layers": 4, "d_model": 64, "n_heads": 4,
              "d_ff": 256, "max_len": 256},
    "receiver": {"n_layers": 2, "d_model": 32, "n_heads": 2,
                 "d_ff": 128, "max_len": 64},
    "bridge": {"n_bridge_heads": 2, "gate_bias_init": -2.0},
    "train": {"epochs": 15, "batch_size": 16, "lr_bridge": 1e-4,
              "lr_receiver": 5e-5, "weight_decay": 0.01, "patience": 3,
              "min_delta": 1e-3, "seed": 42, "max_tokens": 4096,
              "val_fraction": 0.1},
}


@dataclass
class RunConfig:
    donor: StackConfig
    receiver: StackConfig
    bridge: BridgeConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        d = self.donor.to_dict()
        r = self.receiver.to_dict()
        d.pop("vocab_size")
        r.pop("vocab_size")
        return {"donor": d, "receiver": r,
                "bridge": self.bridge.to_dict(),
                "train": self.train.to_dict()}


def _check_keys(section: str, given: dict, allowed: tuple) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(
                f"unknown key '{section}.{key}' (allowed: {', '.join(allowed)})")


def _merged(section: str, overrides: dict, allowed: tuple) -> dict:
    if not isinstance(overrides, dict):
        raise ConfigError(f"section '{section}' must be an object")
    _check_keys(section, overrides, allowed)
    out = dict(DEFAULTS.get(section, {}))
    out.update(overrides)
    return out


def config_from_dict(raw: dict) -> RunConfig:
    """Build a validated RunConfig from a nested plain dict."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    for section in raw:
        if section not in ("donor", "receiver", "bridge", "train"):
            raise ConfigError(f"unknown section '{section}'")

    donor_d = _merged("donor", raw.get("donor", {}), _STACK_KEYS)
    recv_d = _merged("receiver", raw.get("receiver", {}), _STACK_KEYS)
    bridge_d = _merged("bridge", raw.get("bridge", {}), _BRIDGE_KEYS)
    train_d = _merged("train", raw.get("train", {}), _TRAIN_KEYS)

    bridge_d.setdefault("placement", list(range(recv_d["n_layers"])))
    bridge_d.setdefault("d_adapter", max(1, recv_d["d_model"] // 4))

    vocab = ByteTokenizer.vocab_size
    try:
        donor = StackConfig(vocab_size=vocab, **donor_d)
        receiver = StackConfig(vocab_size=vocab, **recv_d)
        placement = bridge_d.pop("placement")
        if not isinstance(placement, (list, tuple)):
            raise ValueError("bridge.placement must be a list of layer indices")
        bridge = BridgeConfig(placement=tuple(placement), **bridge_d)
        train = TrainConfig(**train_d)
        bridge.validate_for(receiver.d_model, receiver.n_layers)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    return RunConfig(donor=donor, receiver=receiver, bridge=bridge, train=train)


def load_config(path: str | None) -> RunConfig:
    """Read a JSON config file; a missing path means all defaults."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_dict(raw)
