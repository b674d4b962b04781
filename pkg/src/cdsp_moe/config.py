"""Run configuration files: five JSON sections mapped onto the module dataclasses."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataConfig
from .dynamics import ChainConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


@dataclass
class OutputConfig:
    directory: str = "runs/default"


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "dynamics": ChainConfig,
            "output": OutputConfig}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dynamics: ChainConfig = field(default_factory=ChainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["train"]["frozen"] = list(d["train"]["frozen"])
        return d

    def validate(self) -> "RunConfig":
        try:
            self.data.validate()
            self.model.validate()
            self.train.validate()
            self.dynamics.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.n_tasks != 3 or self.model.n_outputs != 30:
            raise ConfigError("model.n_tasks must be 3 and model.n_outputs 30 for the three-task image stream")
        return self


def _section(name: str, values: dict, base=None):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)} (valid: {', '.join(sorted(known))})")
    merged = {**asdict(base if base is not None else cls()), **values}
    if name == "train":
        merged["frozen"] = tuple(merged["frozen"])
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad value in {name}: {exc}") from exc


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)} (valid: {', '.join(SECTIONS)})")
    base = base or RunConfig()
    return RunConfig(**{name: _section(name, doc.get(name, {}), getattr(base, name)) for name in SECTIONS})


def load_config(path=None, overrides=(), base: RunConfig | None = None) -> RunConfig:
    """Read ``path`` (optional), apply ``section.key=value`` overrides, validate."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    for item in overrides:
        apply_override(doc, item)
    return from_dict(doc, base).validate()


def apply_override(doc: dict, item: str) -> None:
    """``train.epochs=1`` or ``data.paths.0.images=/x``; values parse as JSON, else as text."""
    key, sep, raw = item.partition("=")
    parts = key.strip().split(".")
    if not sep or len(parts) < 2 or not all(parts):
        raise ConfigError(f"override {item!r} must look like section.key=value")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"unknown section {parts[0]!r} in override {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = value


def write_config_echo(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "config.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path
