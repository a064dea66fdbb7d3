"""Run configuration: TOML files, ``key=value`` overrides and validation.

Precedence, highest first: command-line flags, overrides, file, defaults.
"""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import tomli
import tomli_w

from .condense import CondenseConfig
from .errors import ParseError
from .ot import OtConfig

_OT_DEFAULTS = {f.name: f.default for f in fields(OtConfig)}
_CONDENSE_DEFAULTS = {
    f.name: f.default for f in fields(CondenseConfig) if f.name not in ("ot", "seed", "structure")
}

DEFAULTS: dict = {
    "seed": None,
    "sbm": {"n": 100, "c": 5, "p": 0.8, "q": 0.1},
    "condense": {**_CONDENSE_DEFAULTS, "ot": dict(_OT_DEFAULTS)},
    "eval": {
        "archs": ["gcn", "sgc", "mlp", "cheby"],
        "seeds": 10,
        "epochs": 1000,
        "lr": 0.001,
        "hidden": 128,
        "method": "",
    },
    "spectral": {"mode": "scaled"},
    "baseline": {"method": "random", "ratio": 0.1},
}


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def _check_type(path: str, default, value):
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ParseError(f"config key {path!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ParseError(f"config key {path!r} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"config key {path!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"config key {path!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ParseError(f"config key {path!r} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ParseError(f"config key {path!r} expects a list of strings, got {value!r}")
        return list(value)
    raise ParseError(f"config key {path!r} has unsupported type")


def merge(base: dict, layer: dict, prefix: str = "") -> dict:
    """Overlay ``layer`` onto ``base``; unknown keys and wrong types raise ParseError."""
    out = copy.deepcopy(base)
    for key, value in layer.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ParseError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ParseError(f"config key {path!r} must be a table")
            out[key] = merge(base[key], value, path + ".")
        else:
            out[key] = _check_type(path, base[key], value)
    return out


def load_toml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 text") from exc
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _parse_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def parse_override(item: str, section: str | None = None) -> dict:
    """``a.b=value`` to a nested dict; keys without a known top-level section
    are placed under ``section``. Values use TOML syntax (bare words are strings)."""
    if "=" not in item:
        raise ParseError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = [p.strip() for p in key.strip().split(".")]
    if not all(parts):
        raise ParseError(f"override {item!r} has an empty key")
    return _nest(".".join(parts), _parse_value(raw.strip()), section)


def resolve(file_path=None, overrides=(), flags: dict | None = None, section: str | None = None) -> dict:
    """Defaults, then file, then overrides, then flags (dotted keys allowed)."""
    cfg = defaults()
    if file_path is not None:
        cfg = merge(cfg, load_toml(file_path))
    for item in overrides:
        cfg = merge(cfg, parse_override(item, section))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        cfg = merge(cfg, _nest(key, value, section))
    return cfg


def _nest(key: str, value, section: str | None) -> dict:
    parts = key.split(".")
    if section is not None and parts[0] not in DEFAULTS:
        parts = [section] + parts
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def condense_config(cfg: dict, seed: int) -> CondenseConfig:
    section = dict(cfg["condense"])
    ot = OtConfig(**section.pop("ot"))
    return CondenseConfig(**section, ot=ot, seed=seed).validate()


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    return obj


def dumps_toml(cfg: dict) -> str:
    """TOML text of a resolved config (``None`` values omitted)."""
    return tomli_w.dumps(_strip_none(cfg))
