"""Flat ``key = value`` config files with CLI override precedence."""
from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigError
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r} as {typ.__name__}", field=name) from None


def _field_types() -> dict:
    hints = typing.get_type_hints(TrainConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(TrainConfig)}


def parse_pairs(lines, source="<config>") -> dict:
    types = _field_types()
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown config field {key!r}", field=key)
        out[key] = _convert(key, raw, types[key])
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults < file < overrides; the result is validated."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_pairs(fh, str(path)))
    for key, raw in (overrides or {}).items():
        values.update(parse_pairs([f"{key}={raw}"], "<cli>"))
    return TrainConfig(**values).validate()


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())
