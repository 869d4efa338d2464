"""Dataclass <-> plain-dict conversion for config echo and config files.

Unknown keys are rejected with the offending key named, so a typo in a
config file fails loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    """Config document does not match the target schema."""


def dataclass_to_dict(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: dataclass_to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [dataclass_to_dict(v) for v in obj]
    return obj


def _nested_dataclass(cls, f):
    """Resolve the dataclass type of a field, if it has one."""
    try:
        hints = typing.get_type_hints(cls)
        hint = hints.get(f.name)
    except Exception:
        hint = None
    if hint is not None:
        for candidate in (hint, *typing.get_args(hint)):
            if dataclasses.is_dataclass(candidate) and isinstance(candidate, type):
                return candidate
    if f.default_factory is not dataclasses.MISSING:
        produced = f.default_factory()
        if dataclasses.is_dataclass(produced):
            return type(produced)
    return None


def dataclass_from_dict(cls, data, context=""):
    """Build a dataclass instance from a nested dict, validating keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(
            f"{context or cls.__name__}: expected an object, got {type(data).__name__}"
        )
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            where = f"{context}.{key}" if context else key
            raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        nested = _nested_dataclass(cls, f)
        if nested is not None and isinstance(value, dict):
            value = dataclass_from_dict(nested, value,
                                        context=f"{context}.{name}" if context else name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context or cls.__name__}: {exc}") from exc


def apply_overrides(config, **overrides):
    """dataclasses.replace, ignoring overrides whose value is None."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(config, **updates) if updates else config
