"""Flat ``key = value`` text used for configs, checkpoint headers and manifests
of run settings. One pair per line, keys sorted, ``#`` starts a comment."""

from __future__ import annotations

import dataclasses
from typing import Any, Dict, Type, TypeVar, get_type_hints

from .errors import ConfigError

C = TypeVar("C")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(values: Dict[str, Any]) -> str:
    return "".join(f"{k} = {_format(values[k])}\n" for k in sorted(values))


def loads(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _parse(raw: str, typ) -> Any:
    name = getattr(typ, "__name__", str(typ))
    if raw.lower() == "none" and "Optional" in str(typ):
        return None
    if typ is bool or name == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    text = str(typ)
    if "Tuple[int" in text or "tuple[int" in text:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if "float" in text and "Optional" in text:
        return float(raw)
    if "int" in text and "Optional" in text:
        return int(raw)
    if "str" in text:
        return raw
    raise ConfigError(f"cannot parse {raw!r} as {typ}")


def from_mapping(cls: Type[C], values: Dict[str, str], strict: bool = True) -> C:
    """Build dataclass ``cls`` from string values, ignoring unknown keys unless strict."""
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        if key in names:
            try:
                kwargs[key] = _parse(raw, hints[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
    return cls(**kwargs)


def to_mapping(obj) -> Dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
