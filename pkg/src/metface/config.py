"""Fail-fast construction of config dataclasses from JSON dictionaries."""
from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def from_dict(cls, data: dict | None):
    """Build dataclass ``cls`` from ``data``; unknown keys are an error.

    Nested dataclass fields accept nested dictionaries.
    """
    data = dict(data or {})
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        tp = hints.get(name)
        if dataclasses.is_dataclass(tp) and isinstance(value, dict):
            value = from_dict(tp, value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(cls, path):
    """``cls()`` defaults when ``path`` is None, else the validated JSON file."""
    if path is None:
        return cls()
    return from_dict(cls, json.loads(Path(path).read_text()))
