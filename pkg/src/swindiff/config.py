"""Run configuration: nested dataclasses addressed by dotted ``key=value`` pairs."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

from .swin import SwinConfig


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 1000
    slope: float = 5e-6
    resampled: int = 50


@dataclass(frozen=True)
class DataConfig:
    patch: tuple = (64, 64, 4)
    patches_per_pair: int = 2
    overlap: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 500
    max_steps: int = 0          # 0: no cap beyond epochs
    batch_size: int = 2
    gamma: float = -1.0         # < 0: resampled / training step ratio
    checkpoint_every: int = 50  # epochs
    precision: int = 64


@dataclass(frozen=True)
class SamplingConfig:
    runs: int = 5
    batch: int = 64
    precision: int = 64


@dataclass(frozen=True)
class RunConfig:
    profile: str = "brain"
    seed: int = 0
    model: SwinConfig = field(default_factory=SwinConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    @property
    def gamma(self) -> float:
        if self.train.gamma >= 0:
            return self.train.gamma
        return self.schedule.resampled / self.schedule.steps


PROFILES = {
    "brain": {
        "data.patch": "64,64,4", "train.lr": "3e-5", "train.weight_decay": "1e-5",
        "train.epochs": "500",
    },
    "prostate": {
        "data.patch": "128,128,4", "train.lr": "1e-4", "train.weight_decay": "3e-5",
        "train.epochs": "800",
    },
    "toy": {
        "data.patch": "16,16,4", "model.widths": "16,32,32,32,32", "model.heads": "4",
        "train.lr": "1e-3", "train.weight_decay": "1e-5", "train.epochs": "1000",
        "train.batch_size": "4", "train.checkpoint_every": "0", "sampling.batch": "128",
    },
}


class ConfigError(ValueError):
    pass


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, tuple):
        parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
        kind = type(current[0]) if current else float
        return tuple(kind(p) for p in parts)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value.strip()


def set_key(cfg, key: str, value: str):
    """Return a copy of ``cfg`` with the dotted ``key`` set from its string form."""
    head, _, rest = key.partition(".")
    names = {f.name for f in fields(cfg)}
    if head not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(cfg, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown config key {key!r}")
        return replace(cfg, **{head: set_key(current, rest, value)})
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"config key {key!r} names a section, not a value")
    try:
        return replace(cfg, **{head: _coerce(value, current)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve(pairs: list[tuple[str, str]]) -> RunConfig:
    """Build a config: profile defaults first, then pairs in order."""
    profile = "brain"
    for k, v in pairs:
        if k == "profile":
            profile = v
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=profile)
    for k, v in PROFILES[profile].items():
        cfg = set_key(cfg, k, v)
    for k, v in pairs:
        if k != "profile":
            cfg = set_key(cfg, k, v)
    return cfg


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(cfg, prefix: str = "") -> list[tuple[str, str]]:
    out = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.extend(flatten(value, key + "."))
        else:
            out.append((key, _format(value)))
    return out


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in flatten(cfg))


def loads(text: str) -> RunConfig:
    return resolve(parse_pairs(text))
