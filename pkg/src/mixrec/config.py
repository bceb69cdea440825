"""Training configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

import numpy as np

from .mixing import MixParams
from .objective import LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # defaults match the yelp preset
    batch_size: int = 2048
    embed_dim: int = 64
    layers: int = 3
    tau: float = 0.2
    alpha: float = 0.1
    lambda1: float = 0.3
    lambda2: float = 1e-4
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 10
    eval_every: int = 1
    topn: int = 20
    seed: int = 0
    no_dmcl_user: bool = False
    no_dmcl_item: bool = False
    no_im: bool = False
    no_cm: bool = False
    mix_neg_count: int = 1
    cm_per_anchor: bool = False
    main_beta_scalar: bool = False
    reg_full_table: bool = False
    include_layer0: bool = False
    precision: str = "f64"
    deterministic: bool = False

    def __post_init__(self):
        for name in ("batch_size", "embed_dim", "eval_every", "topn", "mix_neg_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("layers", "max_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if not (self.tau > 0 and self.alpha > 0 and self.learning_rate > 0):
            raise ConfigError("tau, alpha and learning_rate must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def loss_config(self) -> LossConfig:
        return LossConfig(
            tau=self.tau,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            no_dmcl_user=self.no_dmcl_user,
            no_dmcl_item=self.no_dmcl_item,
            no_im=self.no_im,
            no_cm=self.no_cm,
            reg_full_table=self.reg_full_table,
        )

    def mix_params(self) -> MixParams:
        return MixParams(self.alpha, self.mix_neg_count, self.cm_per_anchor, self.main_beta_scalar)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key: {key}")
    kind = type(getattr(TrainConfig(), key))
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key = key.strip()
        values[key] = _coerce(key, raw)
    return values


def parse_overrides(items) -> dict:
    values = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def resolve_config(path=None, overrides=None, **extra) -> TrainConfig:
    """Built-in defaults, then the config file, then ``--set`` overrides, then ``extra``."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    values.update(parse_overrides(overrides))
    values.update({k: v for k, v in extra.items() if v is not None})
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
