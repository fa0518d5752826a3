"""JSON <-> dataclass config mapping with strict key checking."""

import dataclasses
import hashlib
import json
import typing


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


def _json_key(f):
    return f.metadata.get("key", f.name)


def from_dict(cls, data, prefix=""):
    """Build ``cls`` from a JSON object; unknown keys raise, missing keys keep defaults."""
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected a JSON object")
    hints = typing.get_type_hints(cls)
    fields = {_json_key(f): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", f"unknown key (valid keys: {', '.join(sorted(fields))})")
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        path = f"{prefix}{key}"
        typ = hints[f.name]
        if dataclasses.is_dataclass(typ):
            kwargs[f.name] = from_dict(typ, value, prefix=path + ".")
        else:
            kwargs[f.name] = _coerce(typ, value, path)
    obj = cls(**kwargs)
    validate = getattr(obj, "validate", None)
    if validate is not None:
        try:
            validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(prefix.rstrip("."), str(exc)) from None
    return obj


def _coerce(typ, value, path):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        typ = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(typ), typing.get_args(typ)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        (inner,) = args or (typing.Any,)
        if dataclasses.is_dataclass(inner):
            return [from_dict(inner, v, prefix=f"{path}[{i}].") for i, v in enumerate(value)]
        if inner is typing.Any:
            return list(value)
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def to_dict(obj):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, list):
            v = [to_dict(x) if dataclasses.is_dataclass(x) else x for x in v]
        out[_json_key(f)] = v
    return out


def dumps(obj):
    return json.dumps(to_dict(obj), indent=2, sort_keys=True) + "\n"


def schema_hash(*classes):
    """Short digest of the key layout of the given config classes."""

    def layout(cls):
        hints = typing.get_type_hints(cls)
        return {
            _json_key(f): layout(hints[f.name]) if dataclasses.is_dataclass(hints[f.name]) else str(hints[f.name])
            for f in dataclasses.fields(cls)
        }

    blob = json.dumps([layout(c) for c in classes], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
