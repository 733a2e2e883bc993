"""Flat ``key = value`` config files.

One assignment per line, ``#`` starts a comment, values are bare strings.
The same reader backs experiment configs, synthetic-corpus specs and
template definitions; a canonical serialization makes configs hashable
independently of key order.
"""
from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """Malformed config text or an invalid key/value."""


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat key-value text into an ordered dict of strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_kv(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def dump_kv(items: dict[str, str]) -> str:
    """Canonical serialization: sorted keys, one ``key = value`` per line."""
    return "".join(f"{k} = {items[k]}\n" for k in sorted(items))


def config_hash(items: dict[str, str]) -> str:
    """SHA-256 of the canonical serialization; stable under key reordering."""
    return hashlib.sha256(dump_kv(items).encode("utf-8")).hexdigest()


def get_str(items: dict[str, str], key: str, default: str | None = None) -> str:
    if key in items:
        return items[key]
    if default is None:
        raise ConfigError(f"missing required key {key!r}")
    return default


def get_int(items, key, default=None):
    raw = get_str(items, key, None if default is None else str(default))
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected integer, got {raw!r}") from exc


def get_float(items, key, default=None):
    raw = get_str(items, key, None if default is None else repr(default))
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected float, got {raw!r}") from exc


def get_choice(items, key, choices, default=None):
    raw = get_str(items, key, default)
    if raw not in choices:
        raise ConfigError(f"key {key!r}: expected one of {sorted(choices)}, got {raw!r}")
    return raw
