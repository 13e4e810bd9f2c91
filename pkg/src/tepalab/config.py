"""YAML command configs with an explicit schema version and ``key.path=value`` overrides."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError, VersionError

SCHEMA_VERSION = 1


def parse_override(item: str) -> tuple[list[str], object]:
    """``"a.b=3"`` -> ``(["a", "b"], 3)``; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"override {item!r} has an empty key component")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    return path, value


def apply_overrides(cfg: dict, overrides) -> dict:
    out = copy.deepcopy(cfg)
    for item in overrides or []:
        path, value = parse_override(item)
        node = out
        for k in path[:-1]:
            child = node.get(k)
            if child is None:
                child = node[k] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {k!r} is not a mapping")
            node = child
        node[path[-1]] = value
    return out


def check_version(cfg: dict, source: str = "config") -> dict:
    v = cfg.get("schema_version")
    if v is None:
        raise ConfigError(f"{source}: missing schema_version (expected {SCHEMA_VERSION})")
    if v != SCHEMA_VERSION:
        raise VersionError(f"{source}: schema_version {v!r} is not supported (expected {SCHEMA_VERSION})")
    return cfg


def load_config(path, overrides=None) -> dict:
    """Read a YAML mapping, apply overrides and check the schema version.

    Relative paths inside the file are left as written; callers resolve them
    against the file's directory with :func:`resolve`.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return check_version(apply_overrides(cfg, overrides), str(p))


def take(cfg: dict, allowed: set[str], source: str) -> dict:
    """Reject keys outside ``allowed`` so typos fail loudly."""
    extra = sorted(set(cfg) - allowed - {"schema_version"})
    if extra:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(extra)}")
    return {k: v for k, v in cfg.items() if k != "schema_version"}


def check_keys(d: dict | None, cls, source: str) -> dict:
    """Reject keys that are not fields of dataclass ``cls``."""
    d = dict(d or {})
    extra = sorted(set(d) - set(cls.__dataclass_fields__))
    if extra:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(extra)}")
    return d


def resolve(base: Path | None, value):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() or base is None else base / p

