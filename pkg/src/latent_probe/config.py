"""Flat ``key = value`` config files.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Keys use the long CLI flag spelling with ``-`` or ``_`` (``snapshot-every``
and ``snapshot_every`` are the same key). Values stay strings here; the CLI
converts them with the same types it uses for flags.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key or not key.replace("_", "").isalnum():
            raise ConfigError(f"{source}:{lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not UTF-8") from exc
    return parse_config(text, str(path))


def dump_config(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{normalize_key(k)} = {v}")
    return "\n".join(lines) + "\n"


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")
