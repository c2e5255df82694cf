"""Flat ``key = value`` experiment configuration.

One file covers every model field, ablation flag, data, training and stress
setting. Blank lines and ``#`` comments are ignored; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .harness.data import DataConfig
from .model import ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    train_seed: int = 0
    yaw_aug: str = "symmetric"  # symmetric | continuous | off
    flip_aug: bool = True
    val_every: int = 1


@dataclass
class StressConfig:
    n_rotations: int = 10
    n_repeats: int = 3
    stress_seed: int = 0
    eval_frame: str = "source"  # source | rotated


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stress: StressConfig = field(default_factory=StressConfig)

    SECTIONS = ("model", "data", "train", "stress")

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for sec in self.SECTIONS:
            out.update(dataclasses.asdict(getattr(self, sec)))
        return out

    def set(self, key: str, raw: str) -> None:
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                if f.name == key:
                    setattr(obj, key, _coerce(type(getattr(obj, key)), raw, key))
                    return
        raise ConfigurationError(f"unknown config key {key!r}")

    def to_text(self) -> str:
        lines = []
        for sec in self.SECTIONS:
            lines.append(f"# --- {sec} ---")
            for k, v in dataclasses.asdict(getattr(self, sec)).items():
                lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def validate(self) -> None:
        self.model.validate()
        if self.train.yaw_aug not in ("symmetric", "continuous", "off"):
            raise ConfigurationError(f"yaw_aug must be symmetric, continuous or off, not {self.train.yaw_aug!r}")
        if self.stress.eval_frame not in ("source", "rotated"):
            raise ConfigurationError(f"eval_frame must be source or rotated, not {self.stress.eval_frame!r}")
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.lr < 0:
            raise ConfigurationError("epochs/batch_size/lr out of range")
        if self.data.n_train < 1 or self.data.n_val < 1:
            raise ConfigurationError("dataset sizes must be positive")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from None
        cfg = parse_config(text, cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    cfg.validate()
    return cfg
