"""Run configuration: flat dotted keys read from ``key = value`` files."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

from ..masking import MaskRatioDist
from ..model import MageConfig
from ..tokenizer import VqConfig


class ConfigError(ValueError):
    pass


def _choice(*options):
    def check(v):
        if v not in options:
            raise ConfigError(f"must be one of {options}")
    return check


def _range(lo=-math.inf, hi=math.inf):
    def check(v):
        if not lo <= v <= hi:
            raise ConfigError(f"must lie in [{lo}, {hi}]")
    return check


POSITIVE = _range(1)
NONNEG = _range(0)
UNIT = _range(0, 1)

# key -> (type, default, validator)
SCHEMA: dict[str, tuple[type, Any, Any]] = {
    "seed": (int, 0, None),
    "out_dir": (str, "runs/default", None),
    "augmentation": (str, "strong", _choice("strong", "weak", "none")),
    "data.source": (str, "synthetic", None),
    "data.seed": (int, 7, None),
    "data.train_size": (int, 2000, POSITIVE),
    "data.test_size": (int, 500, POSITIVE),
    "data.image_size": (int, 32, POSITIVE),
    "tokenizer.checkpoint": (str, "", None),
    "tokenizer.num_blocks": (int, 2, POSITIVE),
    "tokenizer.res_blocks": (int, 2, POSITIVE),
    "tokenizer.channels": (int, 16, POSITIVE),
    "tokenizer.codebook_size": (int, 64, _range(2)),
    "tokenizer.dim": (int, 16, POSITIVE),
    "tokenizer.beta": (float, 0.25, NONNEG),
    "tokenizer.padding": (str, "zeros", _choice("replicate", "zeros")),
    "tokenizer.epochs": (int, 10, POSITIVE),
    "tokenizer.batch_size": (int, 32, POSITIVE),
    "tokenizer.lr": (float, 2e-3, _range(0)),
    "mask.mode": (float, 0.55, UNIT),
    "mask.std": (float, 0.25, NONNEG),
    "mask.min": (float, 0.5, _range(0.5, 1)),
    "mask.max": (float, 1.0, UNIT),
    "model.width": (int, 128, POSITIVE),
    "model.enc_depth": (int, 4, POSITIVE),
    "model.dec_width": (int, 128, POSITIVE),
    "model.dec_depth": (int, 4, POSITIVE),
    "model.heads": (int, 4, POSITIVE),
    "model.dropout": (float, 0.1, _range(0, 0.99)),
    "model.pad_mode": (str, "class_token", _choice("class_token", "mask_token")),
    "model.bypass_quantizer": (bool, False, None),
    "model.proj_hidden": (int, 256, POSITIVE),
    "model.proj_dim": (int, 64, POSITIVE),
    "loss.lambda": (float, 0.0, NONNEG),
    "loss.temperature": (float, 0.2, _range(1e-6)),
    "loss.contrastive_max_ratio": (float, 0.6, UNIT),
    "loss.label_smoothing": (float, 0.1, _range(0, 0.999)),
    "optim.base_lr": (float, 1.5e-4, _range(0)),
    "optim.weight_decay": (float, 0.05, NONNEG),
    "optim.beta1": (float, 0.9, UNIT),
    "optim.beta2": (float, 0.95, UNIT),
    "optim.clip": (float, 3.0, _range(0)),
    "optim.warmup_frac": (float, 0.025, UNIT),
    "train.epochs": (int, 100, POSITIVE),
    "train.batch_size": (int, 64, POSITIVE),
    "train.checkpoint_every": (int, 10, POSITIVE),
    "train.cache_tokens": (bool, False, None),
    "train.max_steps": (int, 0, NONNEG),
    "sample.steps": (int, 20, POSITIVE),
    "sample.gumbel_temperature": (float, 6.0, NONNEG),
    "sample.temperature": (float, 1.0, _range(1e-6)),
    "probe.epochs": (int, 90, POSITIVE),
    "probe.batch_size": (int, 256, POSITIVE),
    "probe.lr": (float, 0.1, _range(0)),
    "probe.warmup_epochs": (int, 10, NONNEG),
    "probe.ft_lr": (float, 2.5e-4, _range(0)),
    "probe.layer_decay": (float, 0.65, UNIT),
    "cond.epochs": (int, 20, POSITIVE),
    "cond.lr": (float, 1e-3, _range(0)),
}


def _parse_value(raw: str, typ: type, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


class RunConfig(dict):
    """Validated mapping of every schema key to a typed value."""

    def __init__(self, values: dict | None = None, **overrides):
        super().__init__({k: v[1] for k, v in SCHEMA.items()})
        for k, v in {**(values or {}), **overrides}.items():
            self[k.replace("__", ".")] = v
        self.validate()

    def __setitem__(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        typ = SCHEMA[key][0]
        if isinstance(value, str) and typ is not str:
            value = _parse_value(value, typ, key)
        elif typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
        super().__setitem__(key, value)

    def validate(self):
        for key, (_, _, check) in SCHEMA.items():
            if check is not None:
                try:
                    check(self[key])
                except ConfigError as e:
                    raise ConfigError(f"{key}: {e}") from None
        try:
            self.mask_dist()
            self.vq_config()
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self["data.image_size"] % 2 ** self["tokenizer.num_blocks"]:
            raise ConfigError("data.image_size must be divisible by 2**tokenizer.num_blocks")

    def copy(self, **overrides) -> "RunConfig":
        return RunConfig(dict(self), **overrides)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls(parse_config_text(text), **overrides)

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v) if isinstance(v, str) else str(v).lower() if isinstance(v, bool) else v}\n"
                       for k, v in sorted(self.items()))

    def to_json(self) -> dict:
        return dict(sorted(self.items()))

    # typed views -----------------------------------------------------------
    def mask_dist(self) -> MaskRatioDist:
        return MaskRatioDist(self["mask.mode"], self["mask.std"], self["mask.min"], self["mask.max"])

    def vq_config(self) -> VqConfig:
        return VqConfig(num_blocks=self["tokenizer.num_blocks"], res_blocks=self["tokenizer.res_blocks"],
                        channels=self["tokenizer.channels"], codebook_size=self["tokenizer.codebook_size"],
                        dim=self["tokenizer.dim"], beta=self["tokenizer.beta"],
                        padding=self["tokenizer.padding"])

    def token_side(self) -> int:
        return self["data.image_size"] // 2 ** self["tokenizer.num_blocks"]

    def model_config(self) -> MageConfig:
        return MageConfig(
            vocab=self["tokenizer.codebook_size"], seq_len=self.token_side() ** 2,
            width=self["model.width"], enc_depth=self["model.enc_depth"],
            dec_width=self["model.dec_width"], dec_depth=self["model.dec_depth"],
            heads=self["model.heads"], dropout=self["model.dropout"], pad_mode=self["model.pad_mode"],
            input_mode="features" if self["model.bypass_quantizer"] else "tokens",
            feature_dim=self["tokenizer.dim"], proj_hidden=self["model.proj_hidden"],
            proj_dim=self["model.proj_dim"])


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key] = value
    return out
