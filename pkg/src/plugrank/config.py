"""JSON experiment configuration shared by all CLI commands.

One file with optional sections; omitted sections (or keys) fall back to the
desk-scale defaults::

    {
      "data":       { ... GenConfig keys ... },
      "encoders":   { ..., "qm": {"temperature": 0.05, "batch_size": 64} },
      "ppm":        { ... PPMConfig keys ... },
      "urm":        { ..., "plugin": { ... PPMConfig keys ... } },
      "experiment": { "variants": [...], "seeds": [...], ... }
    }
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import GenConfig
from .encoders import EncoderTrainConfig, QMConfig
from .errors import ConfigError
from .experiments import ExperimentConfig
from .pretrain import PPMConfig
from .ranker import URMConfig

_NESTED = {"qm": QMConfig, "plugin": PPMConfig}


def _from_dict(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _from_dict(_NESTED[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _to_dict(obj):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = _to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


@dataclass
class AppConfig:
    data: GenConfig = field(default_factory=GenConfig)
    encoders: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    ppm: PPMConfig = field(default_factory=PPMConfig)
    urm: URMConfig = field(default_factory=URMConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self):
        return {name: _to_dict(getattr(self, name)) for name in
                ("data", "encoders", "ppm", "urm", "experiment")}

    def hash(self):
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


_SECTIONS = {
    "data": GenConfig,
    "encoders": EncoderTrainConfig,
    "ppm": PPMConfig,
    "urm": URMConfig,
    "experiment": ExperimentConfig,
}


def load_config(path=None) -> AppConfig:
    """Read a config file; missing file sections/keys use defaults."""
    if path is None:
        return AppConfig()
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {name: _from_dict(cls, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    cfg = AppConfig(**kwargs)
    cfg.data.validate()
    cfg.experiment.validate()
    return cfg
