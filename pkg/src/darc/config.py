"""Plain-text ``section.key = value`` configuration with command-line overrides.

Example::

    # comments start with '#'
    model.variant = darc-enc
    model.width = 16
    train.iterations = 2000
    synth.count_range = 15, 30
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Iterable

SECTIONS = ("model", "train", "synth", "infer", "stress")


class ConfigError(ValueError):
    pass


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    flat: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value', got {raw.strip()!r}")
        section = key.split(".", 1)[0]
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{n}: unknown section {section!r}")
        flat[key] = value.strip()
    return flat


def load_config(path: Path | str | None, overrides: Iterable[str] = ()) -> dict[str, str]:
    """Read ``path`` (if given) and apply ``key=value`` overrides on top."""
    flat: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        flat.update(parse_lines(path.read_text().splitlines(), str(path)))
    flat.update(parse_lines(overrides, "--set"))
    return flat


def section(flat: dict[str, str], name: str) -> dict[str, str]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def _coerce(text: str, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if args and args[-1] is not Ellipsis and len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            item_types = [args[0]] * len(parts) if args[-1:] == (Ellipsis,) else args
            return tuple(_coerce(p, t, where) for p, t in zip(parts, item_types))
        if origin is list:
            (item,) = typing.get_args(tp)
            return [_coerce(p.strip(), item, where) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def build(cls: type, values: dict[str, str], name: str, **extra: Any) -> Any:
    """Instantiate dataclass ``cls`` from string ``values``; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs: dict[str, Any] = dict(extra)
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        kwargs[key] = _coerce(text, hints[key], f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from None


def render(values: dict[str, Any], name: str) -> list[str]:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{name}.{key} = {value}")
    return lines
