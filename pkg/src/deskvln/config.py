"""Flat ``key = value`` configuration files with ``include`` support.

Keys are dotted (``rl.group_size = 4``); values are parsed as JSON when
possible and kept as bare strings otherwise. ``include = other.cfg`` pulls in
another file relative to the including one; later keys override earlier ones.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path


class ConfigError(Exception):
    pass


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if raw.lower() in ("none", "null"):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("\"'")


def parse_file(path, _seen=None) -> dict:
    path = Path(path).resolve()
    seen = set(_seen or ())
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    seen.add(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key == "include":
            out.update(parse_file(path.parent / str(_parse_value(value)), seen))
        else:
            out[key] = _parse_value(value)
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def section(flat: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in flat.items() if k.startswith(p)}


def _coerce(value, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if isinstance(value, bool):
                return value
            raise ValueError
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if hint is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {hint.__name__}, got {value!r}") from None
    return value


def build(cls, values: dict, prefix: str = ""):
    """Instantiate dataclass ``cls`` from ``values``; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {prefix or cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}" if prefix else k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix or cls.__name__} configuration: {exc}") from None
