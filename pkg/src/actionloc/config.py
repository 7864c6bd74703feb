"""Run configuration: one YAML file covering every stage, strictly validated.

Unknown keys anywhere in the file are rejected, so typos fail fast
instead of silently running defaults.  `input_dim` and `classes` are
normally resolved from the dataset manifest at training time and land in
the resolved snapshot written next to the checkpoint.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .decoder import DecoderConfig
from .detect import InferenceSettings
from .encoder import EncoderConfig
from .evaluate import EvalProtocol
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    weight_decay: float = 0.03
    warmup_epochs: float = 5.0
    epochs: int = 30
    seed: int = 0
    eval_interval: int = 10
    center_radius: float = 1.5

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"training.lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"training.epochs must be >= 1, got {self.epochs}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"training.warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.weight_decay < 0:
            raise ConfigError("training.weight_decay must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("training.eval_interval must be >= 1")
        if self.center_radius <= 0:
            raise ConfigError("training.center_radius must be positive")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    evaluation: EvalProtocol = field(default_factory=EvalProtocol)

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        self.training.validate()
        self.inference.validate()
        self.evaluation.validate()

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(encoder=self.encoder, decoder=self.decoder)


_SECTIONS = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "training": TrainingConfig,
    "inference": InferenceSettings,
    "evaluation": EvalProtocol,
}

_TUPLE_FIELDS = {"branches", "thresholds"}


def _build_section(cls, raw: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad '{section}' section: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    cfg = RunConfig(**{
        name: _build_section(cls, raw.get(name, {}) or {}, name)
        for name, cls in _SECTIONS.items()
    })
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(raw)


def to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        for key, value in section.items():
            if isinstance(value, tuple):
                section[key] = list(value)
        out[name] = section
    return out


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True))
