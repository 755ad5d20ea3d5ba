"""Experiment configuration and its flat ``section.key = value`` text format.

Example::

    stream.num_tasks = 5
    strategy.method = ER_BNT
    experiment.seeds = 0,1,2
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .scenario import ConfigError, StreamConfig
from .strategies import Method, StrategyConfig


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    momentum: float = 0.9
    eps: float = 1e-5


@dataclass
class RunConfig:
    buffer_size: int = 200
    epochs: int = 5
    seeds: tuple[int, ...] = tuple(range(10))
    out_dir: str = "results"
    # "auto" picks NCM for the iCaRL family and the linear head otherwise
    classifier: str = "auto"


@dataclass
class ProbeConfig:
    ema_drift: bool = False
    drift_batches: int = 100
    export_activations: bool = False
    save_checkpoint: bool = False


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    experiment: RunConfig = field(default_factory=RunConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> None:
        self.stream.validate()
        run = self.experiment
        if not run.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        if run.buffer_size < 1:
            raise ConfigError("experiment.buffer_size must be positive")
        if run.epochs < 1:
            raise ConfigError("experiment.epochs must be positive")
        if run.classifier not in ("auto", "linear", "ncm"):
            raise ConfigError(f"experiment.classifier must be auto, linear or ncm, got {run.classifier!r}")
        if self.strategy.method.is_icarl and run.buffer_size < self.stream.num_classes:
            raise ConfigError(
                f"iCaRL needs at least one exemplar per class: buffer {run.buffer_size} "
                f"< {self.stream.num_classes} classes"
            )
        if not self.model.hidden:
            raise ConfigError("model.hidden needs at least one layer")

    @property
    def classifier(self) -> str:
        if self.experiment.classifier != "auto":
            return self.experiment.classifier
        return "ncm" if self.strategy.method.is_icarl else "linear"

    def replace(self, **overrides) -> ExperimentConfig:
        """Copy with dotted-key overrides, e.g. ``replace(**{"strategy.method": "ER"})``."""
        lines = dict(_flatten(self))
        for key, value in overrides.items():
            if key not in lines:
                raise ConfigError(f"unknown config key {key!r}")
            lines[key] = _format(value)
        return parse_config("\n".join(f"{k} = {v}" for k, v in lines.items()))


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _section_types(section: str) -> dict[str, object]:
    cls = typing.get_type_hints(ExperimentConfig)[section]
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, hint) -> object:
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is Method:
            return Method(raw)
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            return tuple(inner(v.strip()) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _flatten(config: ExperimentConfig) -> list[tuple[str, str]]:
    items = []
    for section in _SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            items.append((f"{section}.{f.name}", _format(getattr(obj, f.name))))
    return items


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in _flatten(config))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in values:
            raise ConfigError(f"{source}:{lineno}: unknown section {section!r}")
        hints = _section_types(section)
        if name not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[section][name] = _coerce(key, raw, hints[name])
    try:
        config = ExperimentConfig(
            stream=StreamConfig(**values["stream"]),
            strategy=StrategyConfig(**values["strategy"]),
            model=ModelConfig(**values["model"]),
            experiment=RunConfig(**values["experiment"]),
            probe=ProbeConfig(**values["probe"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    config.validate()
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def fingerprint(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical serialization, ignoring where results are written."""
    text = "".join(
        f"{k} = {v}\n" for k, v in _flatten(config) if k != "experiment.out_dir"
    )
    return hashlib.sha256(text.encode()).hexdigest()
