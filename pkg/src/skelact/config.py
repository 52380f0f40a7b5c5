"""Flat ``key = value`` run configuration with presets.

The file format is one assignment per line; ``#`` starts a comment, blank
lines are ignored. Unknown keys and malformed lines raise
:class:`ConfigFileError` with the offending line number. ``serialize`` and
``parse_text`` round-trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .augment import AugmentConfig
from .model import ModelConfig
from .trainer import OptimConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 1
    dataset_kind: str = "synthetic"
    modality: str = "joint"
    augmentation: str = "none"        # none | nwucla | ntu

    # model
    joints: int = 20
    frames: int = 16
    channels: int = 32
    heads: int = 8
    blocks: int = 4
    blocks_per_stage: int = 2
    tconv_kernel: int = 7
    ffn_expansion: int = 1
    n_classes: int = 4
    layout_kind: str = "nwucla_like"
    attn_dropout: float = 0.0
    drop_path: float = 0.0
    msa_identity: bool = False

    # optimization
    epochs: int = 60
    batch: int = 8
    base_lr: float = 2e-3
    warmup_lr: float = 1e-7
    min_lr: float = 1.5e-3
    warmup_epochs: int = 2
    weight_decay: float = 5e-4
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    early_stop_acc: float = 0.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(V=self.joints, T=self.frames, C=self.channels,
                           H=self.heads, R=self.blocks,
                           blocks_per_stage=self.blocks_per_stage,
                           k=self.tconv_kernel, e=self.ffn_expansion,
                           N_c=self.n_classes, layout_kind=self.layout_kind,
                           attn_dropout=self.attn_dropout,
                           drop_path=self.drop_path,
                           msa_identity=self.msa_identity)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(base_lr=self.base_lr, warmup_lr=self.warmup_lr,
                           min_lr=self.min_lr,
                           warmup_epochs=self.warmup_epochs,
                           epochs=self.epochs, batch=self.batch,
                           weight_decay=self.weight_decay,
                           label_smoothing=self.label_smoothing,
                           clip_norm=self.clip_norm,
                           early_stop_acc=self.early_stop_acc)

    def augment_config(self) -> AugmentConfig:
        if self.augmentation == "none":
            return AugmentConfig.disabled()
        if self.augmentation == "nwucla":
            return AugmentConfig.nwucla_defaults()
        if self.augmentation == "ntu":
            return AugmentConfig.ntu_defaults()
        raise ConfigFileError(
            f"unknown augmentation preset {self.augmentation!r}")


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "ntu":
        return RunConfig(dataset_kind="ntu_like", augmentation="ntu",
                         joints=48, frames=64, channels=96, heads=32,
                         blocks=8, ffn_expansion=4, n_classes=60,
                         layout_kind="ntu_like",
                         attn_dropout=0.5, drop_path=0.2,
                         epochs=500, batch=128, base_lr=1e-3,
                         min_lr=1e-5, warmup_epochs=25)
    raise ConfigFileError(f"unknown preset {name!r}")


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str, lineno: int):
    ftype = _FIELDS[key]
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError(raw)
            return val
        return raw
    except ValueError:
        raise ConfigFileError(
            f"line {lineno}: cannot parse {raw!r} as {ftype} for key {key!r}")


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', "
                                  f"got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw, lineno))
    return cfg


def parse_file(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}")
    return parse_text(text, base)


def serialize(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
