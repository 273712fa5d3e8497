"""Flat ``key = value`` config text for dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from typing import Any, Type, TypeVar

from .exceptions import ConfigError

C = TypeVar("C")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(obj) -> str:
    """Key-sorted ``key = value`` lines."""
    items = sorted((f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj))
    return "".join(f"{k} = {_format(v)}\n" for k, v in items)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def _coerce(text: str, annotation) -> Any:
    origin = typing.get_origin(annotation)
    if annotation is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if annotation in (int, float, str):
        return annotation(text)
    if origin is tuple:
        inner = typing.get_args(annotation)[0]
        return tuple(inner(v) for v in text.split(",") if v.strip())
    if origin is typing.Union:
        for arg in typing.get_args(annotation):
            try:
                return _coerce(text, arg)
            except (ValueError, ConfigError):
                continue
        raise ConfigError(f"cannot parse {text!r}")
    return text


def config_from_dict(cls: Type[C], values: dict[str, Any], base: C | None = None) -> C:
    """Build ``cls`` from string (or already-typed) values, starting from ``base``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {} if base is None else {n: getattr(base, n) for n in names}
    for key, value in values.items():
        try:
            kwargs[key] = _coerce(value, hints[key]) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return cls(**kwargs)


def load_config(cls: Type[C], text: str, base: C | None = None) -> C:
    return config_from_dict(cls, parse_kv(text), base)
