"""Flat ``key = value`` configuration files.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Vectors are comma-separated numbers.  Parsing keeps line numbers so errors
can point at the offending entry, and loaders flag unknown keys to catch
typos early.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Malformed configuration content or unusable values."""


def parse_config_text(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Parse to {key: (raw value, line number)}."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def load_config_file(path) -> "ConfigMap":
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return ConfigMap(parse_config_text(text, source=str(path)), source=str(path))


class ConfigMap:
    """Typed access to parsed entries with unknown-key detection."""

    def __init__(self, entries: dict[str, tuple[str, int]], source: str = "<config>"):
        self._entries = entries
        self._source = source
        self._used: set[str] = set()

    def _raw(self, key: str):
        if key in self._entries:
            self._used.add(key)
            return self._entries[key]
        return None

    def _fail(self, key: str, lineno: int, message: str):
        raise ConfigError(f"{self._source}:{lineno}: field {key!r}: {message}")

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self._raw(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"{self._source}: missing required field {key!r}")
            return default
        value, lineno = raw
        try:
            return float(value)
        except ValueError:
            self._fail(key, lineno, f"expected a number, got {value!r}")

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self._raw(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"{self._source}: missing required field {key!r}")
            return default
        value, lineno = raw
        try:
            return int(value)
        except ValueError:
            self._fail(key, lineno, f"expected an integer, got {value!r}")

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self._raw(key)
        if raw is None:
            return default
        value, lineno = raw
        lowered = value.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        self._fail(key, lineno, f"expected a boolean, got {value!r}")

    def get_vec3(self, key: str, default=None):
        raw = self._raw(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"{self._source}: missing required field {key!r}")
            return list(default)
        value, lineno = raw
        parts = [p.strip() for p in value.split(",")]
        if len(parts) != 3:
            self._fail(key, lineno, f"expected three comma-separated numbers, got {value!r}")
        try:
            return [float(p) for p in parts]
        except ValueError:
            self._fail(key, lineno, f"expected three comma-separated numbers, got {value!r}")

    def reject_unknown_keys(self):
        unknown = sorted(set(self._entries) - self._used)
        if unknown:
            lines = ", ".join(f"{k!r} (line {self._entries[k][1]})" for k in unknown)
            raise ConfigError(f"{self._source}: unknown field(s): {lines}")
