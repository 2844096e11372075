"""Plain-text ``key=value`` configuration files.

Blank lines and ``#`` comments are skipped. Values are coerced to the type
of the matching field of the target dataclass; unknown keys raise
:class:`ConfigError`.
"""

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def parse_keyvalue(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_keyvalue(path):
    with open(path) as f:
        return parse_keyvalue(f.read())


def format_keyvalue(mapping):
    return "".join(f"{k}={v}\n" for k, v in mapping.items())


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _coerce(raw, annotation, key):
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
        if origin is tuple:
            args = typing.get_args(annotation)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(p, args[0], key) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    raise ConfigError(f"{key}: unsupported field type {annotation!r}")


def dataclass_from_mapping(cls, mapping, base=None):
    """Build ``cls`` from string values, starting from ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {cls.__name__}: {', '.join(unknown)}")
    values = {k: _coerce(v, hints[k], k) for k, v in mapping.items()}
    base = base if base is not None else cls()
    return dataclasses.replace(base, **values)


def dataclass_to_mapping(obj):
    return {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
