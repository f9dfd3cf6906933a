"""Run configuration: dataclasses plus a flat ``key = value`` text format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from typing import Tuple


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_patches: int = 32
    patch_size: int = 64
    extractor: str = "pointnet"
    d_feat: int = 256
    d_pos: int = 64
    extractor_hidden: Tuple[int, ...] = (64, 128)
    pos_hidden: int = 64
    enc_depth: int = 6
    enc_dim: int = 256
    enc_heads: int = 4
    dec_depth: int = 2
    dec_dim: int = 192
    dec_heads: int = 3
    mlp_ratio: float = 4.0
    dropout_p: float = 0.0
    center_hidden: Tuple[int, ...] = (512, 1024)
    fold_hidden: Tuple[int, ...] = (256, 128)
    patch_radius: float = 0.15
    per_patch_mask_tokens: bool = False

    @property
    def d_tok(self):
        return self.d_feat + self.d_pos

    @property
    def grid_size(self):
        return math.isqrt(self.patch_size)

    def validate(self):
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ConfigError("encoder and decoder depth must be >= 1")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("transformer dims must be divisible by their head counts")
        if self.grid_size ** 2 != self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must be a perfect square (folding grid)")
        if self.num_patches < 1:
            raise ConfigError("num_patches must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        return self

    def hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PretrainConfig:
    epochs: int = 300
    batch_size: int = 32
    base_lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 1e-4
    mask_strategy: str = "block"
    mask_ratio: float = 0.7
    alpha: float = 1.0
    seed: int = 1
    n_points: int = 2048
    augment: bool = True
    fps_random_start: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.mask_strategy not in ("random", "block"):
            raise ConfigError(f"mask_strategy must be 'random' or 'block', got {self.mask_strategy!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        m = self.model.validate()
        if m.num_patches > self.n_points or m.patch_size > self.n_points:
            raise ConfigError("num_patches and patch_size must not exceed n_points")
        return self


@dataclass
class DownstreamConfig:
    finetune_epochs: int = 40
    finetune_batch_size: int = 32
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 1e-4
    head_dropout: float = 0.5
    probe_epochs: int = 100
    probe_lr: float = 1e-3
    probe_batch_size: int = 32
    downstream_points: int = 1024
    transfer_pos_embed: bool = False
    seed: int = 1

    def validate(self):
        if min(self.finetune_epochs, self.finetune_batch_size, self.probe_epochs, self.probe_batch_size) < 1:
            raise ConfigError("downstream epochs and batch sizes must be >= 1")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError("head_dropout must lie in [0, 1)")
        if self.downstream_points < 1:
            raise ConfigError("downstream_points must be >= 1")
        return self


def _coerce(tp, raw: str, key: str):
    raw = raw.strip()
    try:
        if tp in (int, "int"):
            return int(raw)
        if tp in (float, "float"):
            return float(raw)
        if tp in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp in (str, "str"):
            return raw
        if "Tuple" in str(tp):
            return tuple(int(t) for t in raw.replace(" ", "").split(",") if t)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key!r}")


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def parse_flat(text: str):
    """``key = value`` lines; ``#`` starts a comment. Returns an ordered dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_overrides(targets, values):
    """Set ``values`` (str -> str) on whichever dataclass in ``targets`` owns each key."""
    for key, raw in values.items():
        for obj in targets:
            types = _field_types(type(obj))
            if key in types and key != "model":
                setattr(obj, key, _coerce(types[key], raw, key))
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")


def to_flat(*objs) -> str:
    lines, seen = [], set()
    for obj in objs:
        for f in fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val) or f.name in seen:
                continue
            seen.add(f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def load_configs(text: str = "", overrides=None):
    """Build (PretrainConfig, DownstreamConfig) from flat text plus overrides."""
    pre = PretrainConfig()
    down = DownstreamConfig()
    targets = (pre, pre.model, down)
    apply_overrides(targets, parse_flat(text))
    if overrides:
        apply_overrides(targets, {k: str(v) for k, v in overrides.items()})
    down.seed = pre.seed
    pre.validate()
    down.validate()
    return pre, down
