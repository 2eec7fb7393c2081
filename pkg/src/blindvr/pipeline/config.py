"""Run configuration: dataclasses, YAML round trip, presets, fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from ..cfc import CFCConfig
from ..dac import DACConfig
from ..encoders import EncoderConfig

SCHEMA_VERSION = 1
STAGES = ("simulate", "train_dac", "train_cfc", "recover", "evaluate")


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    name: str = "adamw"
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch_clips: int = 2
    steps: int = 200
    warmup_steps: int = 0


@dataclass
class SimulationConfig:
    n_clips: int = 8
    length: int = 8
    kinds: tuple[str, ...] = ("color_stripe", "block_shift", "freeze_propagate", "texture_noise")
    area_fraction: float = 0.25
    residual_retention: float = 0.2


@dataclass
class RunConfig:
    stage: str = "train_dac"
    seed: int | None = None
    n_local: int = 5
    n_nonlocal: int = 3
    height: int = 64
    width: int = 64
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    dac: DACConfig = field(default_factory=DACConfig)
    cfc: CFCConfig = field(default_factory=CFCConfig)
    dac_optim: OptimConfig = field(default_factory=OptimConfig)
    cfc_optim: OptimConfig = field(
        default_factory=lambda: OptimConfig(name="adam", lr=1e-4, weight_decay=0.0, batch_clips=4, steps=300)
    )
    # completion stand-in learning rate relative to cfc_optim.lr (1e-5 / 1e-4)
    finetune_lr_scale: float = 0.1
    # steps at the start of stage 2 that pretrain the recovery baseline with
    # every parameter trainable; afterwards the recovery head is frozen
    recovery_warmup_steps: int = 150
    freeze_recovery_head: bool = True
    train_mask_source: str = "dac"  # "dac" | "gt"
    log_every: int = 25
    eval_every: int = 0
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.stage in ("simulate", "train_dac", "train_cfc") and self.seed is None:
            raise ConfigError(f"stage {self.stage} requires a seed")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema {self.schema_version}, expected {SCHEMA_VERSION}")
        div = 2 ** (len(self.dac.encoder.channels) + 1)
        if self.height % 16 or self.width % 16 or self.height % div or self.width % div:
            raise ConfigError(f"resolution {self.width}x{self.height} must be divisible by 16 and {div}")
        if tuple(self.cfc.foundation_channels) != tuple(self.dac.encoder.channels):
            raise ConfigError("cfc.foundation_channels must equal dac.encoder.channels")
        if len(self.cfc.channels) != len(self.dac.encoder.channels):
            raise ConfigError("cfc and dac pyramids need the same number of scales")
        if self.train_mask_source not in ("dac", "gt"):
            raise ConfigError(f"train_mask_source must be 'dac' or 'gt'")


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, float) and np.isinf(v):
            return ".inf"
        return v

    return conv(cfg)


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        elif typing.get_origin(hint) is tuple:
            kwargs[key] = tuple(value)
        elif value == ".inf":
            kwargs[key] = float("inf")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing config file {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    preset = data.pop("preset", None)
    base = to_dict(preset_config(preset)) if preset else {}
    return from_dict(_merge(base, data))


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(cfg: RunConfig, items: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    data = to_dict(cfg)
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def preset_config(name: str | None) -> RunConfig:
    """``desk`` (default test profile), ``overfit`` or ``paper``."""
    if name in (None, "desk"):
        return RunConfig()
    if name == "overfit":
        return RunConfig(
            dac_optim=OptimConfig(name="adamw", lr=2e-3, weight_decay=0.01, batch_clips=8, steps=200, warmup_steps=20),
            cfc_optim=OptimConfig(name="adam", lr=2e-3, weight_decay=0.0, batch_clips=2, steps=300, warmup_steps=10),
        )
    if name == "paper":
        return RunConfig(
            height=240,
            width=432,
            dac_optim=OptimConfig(name="adamw", lr=5e-5, weight_decay=0.01, batch_clips=2, steps=100_000),
            cfc_optim=OptimConfig(name="adam", lr=1e-4, weight_decay=0.0, batch_clips=4, steps=100_000),
            recovery_warmup_steps=0,
        )
    raise ConfigError(f"unknown preset {name!r}")


def substream(seed: int, name: str) -> int:
    """Independent 63-bit seed for the named random stream of a run."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def structure_fingerprint(cfg: RunConfig, module=None) -> str:
    """Hash of everything that fixes parameter shapes.

    Optimizer settings, seeds and step counts are excluded so that resumed or
    re-tuned runs stay compatible.
    """
    structural = {
        "encoder": to_dict(cfg.dac.encoder),
        "dac": {k: v for k, v in to_dict(cfg.dac).items() if k in (
            "num_prompts", "heads", "decoder_depth", "iou_head", "neck_variant")},
        "cfc": {k: v for k, v in to_dict(cfg.cfc).items() if k in (
            "channels", "foundation_channels", "qk_rank", "num_experts", "num_prompts",
            "prompt_dim", "adapt_dim", "gate", "heads", "global_encoder")},
    }
    if module is not None:
        structural["params"] = [[k, list(v.shape)] for k, v in module.state_dict().items()]
    blob = json.dumps(structural, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def encoder_config(**kw) -> EncoderConfig:
    return EncoderConfig(**kw)
