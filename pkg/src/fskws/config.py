"""Single-file run configuration (YAML) with dotted command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

import yaml

from .audio import DspConfig
from .augment import (AugmentConfig, DirectoryNoiseProvider, DirectoryRirProvider,
                      SyntheticNoiseProvider, SyntheticRirProvider)
from .buffer import BufferConfig
from .encoder import EncoderConfig
from .evaluation import TrialSpec
from .protonet import TrainConfig
from .sources import OracleGenConfig

CONFIG_ENV = "FSKWS_CONFIG"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    vol_max_range: tuple = (0.2, 0.9)
    snr_db_range: tuple = (10.0, 20.0)
    apply_prob: float = 0.9
    t60_range: tuple = (0.1, 0.6)


@dataclass(frozen=True)
class EvalSection:
    n_targets: int = 10
    n_unknown: int = 20
    k_sweep: tuple = (1, 5, 20)
    n_trials: int = 100
    threshold_mode: str = "oracle"
    noisy_queries: bool = False
    layout: str = "gsc"
    test_count: int = 250
    min_count: int | None = None
    max_count: int | None = None
    oracle_classes: int = 30
    oracle_support: int = 20
    oracle_test: int = 20


@dataclass(frozen=True)
class DetectSection:
    d_th: float | None = None


@dataclass(frozen=True)
class PathsSection:
    out_dir: str = "runs/default"
    noise_dir: str | None = None
    rir_dir: str | None = None


SECTIONS = {
    "dsp": DspConfig,
    "augment": AugmentSection,
    "oracle": OracleGenConfig,
    "buffer": BufferConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "eval": EvalSection,
    "detect": DetectSection,
    "paths": PathsSection,
}
TOP_LEVEL = ("seed", "workers")


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    dsp: DspConfig = field(default_factory=DspConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    oracle: OracleGenConfig = field(default_factory=OracleGenConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    detect: DetectSection = field(default_factory=DetectSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self):
        if self.buffer.k_shots != self.train.k_shots:
            raise ConfigError("buffer.k_shots and train.k_shots disagree")
        if self.buffer.n_way != self.train.n_way:
            raise ConfigError("buffer.n_way and train.n_way disagree")
        if self.train.seed != self.seed:
            raise ConfigError("train.seed must equal the global seed (set only 'seed')")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def augment_config(self) -> AugmentConfig | None:
        a = self.augment
        if not a.enabled:
            return None
        rir = (DirectoryRirProvider(self.paths.rir_dir) if self.paths.rir_dir
               else SyntheticRirProvider(a.t60_range))
        noise = (DirectoryNoiseProvider(self.paths.noise_dir) if self.paths.noise_dir
                 else SyntheticNoiseProvider())
        return AugmentConfig(a.vol_max_range, a.snr_db_range, a.apply_prob, True, rir, noise)

    def trial_spec(self, k_shots: int) -> TrialSpec:
        e = self.eval
        return TrialSpec(e.n_targets, e.n_unknown, k_shots, e.n_trials, self.seed,
                         self.train.distance, e.threshold_mode)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "workers": self.workers}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in values.items():
        default = known[k].default
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from exc


def parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value: {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def config_from_dict(data: dict | None, overrides=()) -> RunConfig:
    data = dict(data or {})
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        if len(parts) == 1:
            data[parts[0]] = value
        elif len(parts) == 2:
            section = data.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{parts[0]}] is not a section")
            section[parts[1]] = value
        else:
            raise ConfigError(f"override key too deep: {key!r}")
    unknown = set(data) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    seed = data.get("seed", 0)
    train = dict(data.get("train") or {})
    train.setdefault("seed", seed)
    data["train"] = train
    kwargs = {k: data[k] for k in TOP_LEVEL if k in data}
    for name, cls in SECTIONS.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a mapping")
        kwargs[name] = _build(cls, section, name)
    return RunConfig(**kwargs).validate()


def load_config(path=None, overrides=()) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV)
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
    return config_from_dict(data, overrides)
