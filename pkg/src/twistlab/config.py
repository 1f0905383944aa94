"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Tuples are written comma separated (``global_scale = 0.4, 1.0``) and
booleans as ``true``/``false``. Keys that are not listed in
:class:`Settings` are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields

from .data import AugmentConfig
from .errors import ConfigError
from .losses import TwistCoefficients
from .model import ModelConfig
from .pipeline import SelfLabelConfig, TrainConfig

PROFILES = ("desk", "full")


@dataclass
class Settings:
    # data
    data_source: str = "gaussian"  # gaussian | csv | idx
    data_path: str = ""
    labels_path: str = ""
    mixture_k: int = 4
    mixture_dim: int = 16
    mixture_n: int = 2048
    mixture_separation: float = 6.0
    data_seed: int = 0
    # model
    class_count: int = 4
    backbone_widths: tuple = (256, 256)
    head_widths: tuple = (256, 256)
    backbone_bn: bool = True
    head_bn: bool = True
    nbs: bool = True
    # loss
    alpha: float = 1.0
    beta: float = 1.0
    # training
    seed: int = 0
    epochs: int = 200
    batch_size: int = 128
    optimizer: str = "sgd"
    lr: float | None = None  # unset -> 0.5 * batch_size / 256
    final_lr: float = 0.0
    warmup_epochs: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    trust_coefficient: float = 0.001
    pairing_mode: str = "all-pairs"
    ema: bool = False
    ema_momentum_start: float = 0.99
    ema_momentum_end: float = 0.99
    # augmentation
    n_global: int = 2
    n_local: int = 0
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.05, 0.4)
    noise_sigma: float = 0.1
    flip: bool = True
    # self-labeling
    selflabel_epochs: int | None = None  # unset -> a quarter of the training epochs
    selflabel_start_fraction: float = 0.5
    selflabel_end_fraction: float = 0.6
    selflabel_lr: float = 0.02
    selflabel_global_scale: tuple = (0.14, 0.4)
    selflabel_local_scale: tuple = (0.05, 0.14)
    # evaluation
    probe_epochs: int = 500
    probe_lr: float = 0.5
    probe_train_fraction: float = 0.5

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            class_count=self.class_count,
            backbone_widths=tuple(self.backbone_widths),
            head_widths=tuple(self.head_widths),
            backbone_bn=self.backbone_bn,
            head_bn=self.head_bn,
            nbs=self.nbs,
        )

    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.n_global, self.n_local, tuple(self.global_scale),
                             tuple(self.local_scale), self.noise_sigma, self.flip)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            coefficients=TwistCoefficients(self.alpha, self.beta, self.class_count),
            optimizer=self.optimizer,
            lr=self.lr,
            final_lr=self.final_lr,
            warmup_epochs=self.warmup_epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            trust_coefficient=self.trust_coefficient,
            augment=self.augment(),
            ema=self.ema,
            ema_momentum_start=self.ema_momentum_start,
            ema_momentum_end=self.ema_momentum_end,
            seed=self.seed,
            pairing_mode=self.pairing_mode,
        )

    def self_label_config(self) -> SelfLabelConfig:
        epochs = self.selflabel_epochs
        if epochs is None:
            epochs = max(1, math.ceil(self.epochs / 4))
        aug = dataclasses.replace(self.augment(), global_scale=tuple(self.selflabel_global_scale),
                                  local_scale=tuple(self.selflabel_local_scale))
        return SelfLabelConfig(
            epochs=epochs,
            start_fraction=self.selflabel_start_fraction,
            end_fraction=self.selflabel_end_fraction,
            lr=self.selflabel_lr,
            batch_size=self.batch_size,
            augment=aug,
        )


def profile_defaults(profile: str) -> Settings:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    s = Settings()
    if profile == "full":
        s.head_widths = (4096, 4096)
        s.optimizer = "lars"
        s.n_local = 10
        s.warmup_epochs = 10
        s.weight_decay = 1.5e-6
    return s


_FIELDS = {f.name: f for f in fields(Settings)}
_OPTIONAL = {"lr", "selflabel_epochs"}


def _kind(name: str, default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, tuple):
        return (tuple, type(default[0]))
    if name == "lr":
        return float
    if name == "selflabel_epochs":
        return int
    return type(default)


def _convert(name: str, raw: str, line: int):
    kind = _kind(name, getattr(Settings(), name))
    if name in _OPTIONAL and raw.lower() in ("", "auto"):
        return None
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return low == "true"
        if isinstance(kind, tuple):
            return tuple(kind[1](part.strip()) for part in raw.split(",") if part.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {exc}", line) from None


def parse_config(text: str, profile: str = "desk") -> Settings:
    """Parse config text on top of the defaults of ``profile``."""
    s = profile_defaults(profile)
    seen = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        seen.add(key)
        setattr(s, key, _convert(key, value, lineno))
    return s


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(s: Settings) -> str:
    """Every effective setting, one per line; parses back to an equal object."""
    return "".join(f"{f.name} = {_format(getattr(s, f.name))}\n" for f in fields(Settings))


def config_fingerprint(s: Settings) -> str:
    return hashlib.sha256(format_config(s).encode()).hexdigest()
