"""Run configuration: one dataclass per command plus global settings.

A config file is JSON shaped like ``RunConfig.to_dict()``; any key may
be left out and takes its default, unknown keys are rejected. Command
line flags are applied on top with ``override``. The merged result is
written next to the command's outputs as ``resolved-config.json``, and
passing that file back with ``--config`` repeats the run.
"""

import json
import logging
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from typing_extensions import Self

from .common import ConfigError
from .denoiser import NetConfig
from .flow import TrainConfig
from .metrics import MetricConfig
from .scenarios import EVENT_PROBABILITY, KINDS, MIN_LENGTH
from .text_encoding import REFERENCE_DIM

__all__ = [
    "LOG_LEVELS",
    "GlobalConfig",
    "SynthDataConfig",
    "AnnotateConfig",
    "TrainCommandConfig",
    "SampleConfig",
    "EvalConfig",
    "ProbeConfig",
    "JudgeConfig",
    "RunConfig",
    "load_run_config",
    "override",
    "write_run_snapshot",
]


LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class GlobalConfig:
    seed: int = 0
    output_dir: str = "out"
    log_level: str = "INFO"


@dataclass
class SynthDataConfig:
    kind: str = "pv"
    n: int = 512
    length: int = 64
    net_levels: int = 4  # only used for the divisibility warning
    event_probability: float = EVENT_PROBABILITY


@dataclass
class AnnotateConfig:
    dataset: str | None = None
    embedding_dim: int = REFERENCE_DIM


@dataclass
class TrainCommandConfig:
    dataset: str | None = None
    embeddings: str | None = None
    resume: str | None = None
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class SampleConfig:
    checkpoint: str | None = None
    prompts: str | None = None
    embeddings: str | None = None
    steps: int = 50
    per_prompt: int = 1
    workers: int = 1


@dataclass
class EvalConfig:
    real: str | None = None
    generated: str | None = None
    metrics: MetricConfig = field(default_factory=MetricConfig)


@dataclass
class ProbeConfig:
    dataset: str | None = None
    embeddings: str | None = None
    embedding_dim: int = REFERENCE_DIM


@dataclass
class JudgeConfig:
    generated: str | None = None


@dataclass
class RunConfig:
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    synth_data: SynthDataConfig = field(default_factory=SynthDataConfig)
    annotate: AnnotateConfig = field(default_factory=AnnotateConfig)
    train: TrainCommandConfig = field(default_factory=TrainCommandConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)

    def validate(self) -> None:
        g = self.global_
        if g.log_level not in LOG_LEVELS:
            raise ConfigError(f"global.log_level must be one of {LOG_LEVELS}, got {g.log_level!r}")
        if self.synth_data.kind not in KINDS:
            raise ConfigError(f"synth_data.kind must be one of {KINDS}, got {self.synth_data.kind!r}")
        if self.synth_data.n < 1 or self.synth_data.length < MIN_LENGTH:
            raise ConfigError(f"synth_data needs n >= 1 and length >= {MIN_LENGTH}")
        if not 0.0 <= self.synth_data.event_probability <= 1.0:
            raise ConfigError("synth_data.event_probability must lie in [0, 1]")
        if self.sample.steps < 1 or self.sample.per_prompt < 1 or self.sample.workers < 1:
            raise ConfigError("sample.steps, sample.per_prompt and sample.workers must be >= 1")
        self.train.train.validate()

    @property
    def log_level(self) -> int:
        return getattr(logging, self.global_.log_level)

    def to_dict(self) -> dict:
        return _to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return _from_dict(cls, data, "")

    def resolved(self) -> "RunConfig":
        """Validated copy in which the global seed also seeds training."""
        train = replace(self.train, train=replace(self.train.train, seed=self.global_.seed))
        cfg = replace(self, train=train)
        cfg.validate()
        return cfg


def _key(name: str) -> str:
    return name.rstrip("_")


def _to_dict(obj) -> dict:
    result = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            value = _to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        result[_key(f.name)] = value
    return result


def _from_dict(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    default = cls()
    by_key = {_key(f.name): f.name for f in fields(cls)}
    values = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in by_key:
            raise ConfigError(f"unknown config key: {where}")
        name = by_key[key]
        current = getattr(default, name)
        if is_dataclass(current):
            value = _from_dict(type(current), value, where)
        elif isinstance(value, list):
            value = tuple(value)
        values[name] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {path or 'config'}: {e}") from e


def load_run_config(path: Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return RunConfig.from_dict(data)


def override(cfg, dotted: str, value):
    """Return ``cfg`` with the field at ``dotted`` (e.g. ``train.train.epochs``) replaced.

    ``None`` leaves the config untouched, so unset flags never mask file values.
    """
    if value is None:
        return cfg
    head, _, rest = dotted.partition(".")
    name = "global_" if head == "global" else head
    if not any(f.name == name for f in fields(cfg)):
        raise ConfigError(f"unknown config key: {dotted}")
    if rest:
        value = override(getattr(cfg, name), rest, value)
    return replace(cfg, **{name: value})


def write_run_snapshot(cfg: RunConfig, command: str, output_dir: Path) -> None:
    """Write ``resolved-config.json`` and ``run.json`` into ``output_dir``."""
    from . import __version__

    (output_dir / "resolved-config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    run = {
        "version": 1,
        "tool": "scenario-flow",
        "tool_version": __version__,
        "command": command,
        "seed": cfg.global_.seed,
    }
    (output_dir / "run.json").write_text(json.dumps(run, indent=2) + "\n", encoding="utf-8")
