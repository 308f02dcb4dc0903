"""Run configuration: typed sections flattened to ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .field import FieldConfig
from .objectives import LossWeights
from .state import StateSpec
from .teacher import TeacherConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    K: int = 4
    noise_sigma: float = 0.05
    random_grid: bool = True
    batch_size: int = 4
    iterations: int = 2000
    seed: int = 0
    down_mode: str = "avg_pool"  # avg_pool | learned
    detach_rt_inner: bool = False
    mv_eps: float = 1e-3
    eval_every: int = 0
    checkpoint_every: int = 500
    log_timing: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.iterations < 0:
            raise ConfigError("train.iterations must be non-negative")
        if self.K < 1:
            raise ConfigError("train.K must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.down_mode not in ("avg_pool", "learned"):
            raise ConfigError(f"unknown train.down_mode {self.down_mode!r}")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # synthetic | ppm_dir
    kinds: tuple[str, ...] = ("gradient", "checkerboard", "blobs", "sinusoid")
    count: int = 8
    directory: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "ppm_dir"):
            raise ConfigError(f"unknown data.source {self.source!r}")
        if self.count < 1:
            raise ConfigError("data.count must be at least 1")


SECTIONS = {
    "state": StateSpec,
    "field": FieldConfig,
    "teacher": TeacherConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "data": DatasetSpec,
}


@dataclass(frozen=True)
class RunConfig:
    state: StateSpec = dataclasses.field(default_factory=StateSpec)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    teacher: TeacherConfig = dataclasses.field(default_factory=TeacherConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    loss: LossWeights = dataclasses.field(default_factory=LossWeights)
    data: DatasetSpec = dataclasses.field(default_factory=DatasetSpec)

    def __post_init__(self):
        try:
            self.field.validate(self.state)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                flat[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.to_flat().items()))

    def override(self, values: dict[str, Any]) -> "RunConfig":
        """New config with dotted keys replaced; string values are parsed."""
        updates: dict[str, dict[str, Any]] = {}
        for key, raw in values.items():
            section, _, name = key.partition(".")
            cls = SECTIONS.get(section)
            names = {f.name: f for f in dataclasses.fields(cls)} if cls else {}
            if name not in names:
                raise ConfigError(f"unknown configuration key {key!r}")
            current = getattr(getattr(self, section), name)
            value = parse_value(raw, current, key) if isinstance(raw, str) else raw
            updates.setdefault(section, {})[name] = value
        try:
            parts = {
                s: dataclasses.replace(getattr(self, s), **updates.get(s, {})) for s in SECTIONS
            }
            return RunConfig(**parts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "RunConfig":
        return cls().override(values)

    def seed_for(self, purpose: str) -> int:
        return derive_seed(self.train.seed, purpose)


def derive_seed(seed: int, purpose: str) -> int:
    """Fixed hash of (seed, purpose) to a 63-bit sub-seed."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str, like: Any, key: str = "") -> Any:
    text = text.strip()
    try:
        if isinstance(like, bool):
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(p.strip() for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} for {key or 'value'}") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    return RunConfig.from_flat(values)
