"""Sectioned key-value text files with line-numbered errors.

Format::

    # comment
    [section name]
    key = value
    key = another value     # repeated keys are kept in order

configparser drops line numbers once a file is parsed, so entries here keep
the line they came from and every semantic check can point back at it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Malformed or invalid configuration file."""

    def __init__(self, msg: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {msg}" if where else msg)


@dataclass
class Entry:
    key: str
    value: str
    line: int


@dataclass
class Section:
    name: str
    line: int
    entries: list[Entry] = field(default_factory=list)
    path: str | None = None

    def keys(self) -> set[str]:
        return {e.key for e in self.entries}

    def all(self, key: str) -> list[Entry]:
        return [e for e in self.entries if e.key == key]

    def get(self, key: str) -> Entry | None:
        found = self.all(key)
        if len(found) > 1:
            raise ConfigError(f"duplicate key '{key}' in [{self.name}]", self.path, found[1].line)
        return found[0] if found else None

    def require(self, key: str) -> Entry:
        e = self.get(key)
        if e is None:
            raise ConfigError(f"missing key '{key}' in [{self.name}]", self.path, self.line)
        return e

    def float(self, key: str, default: float | None = None) -> float:
        e = self.get(key)
        if e is None:
            if default is None:
                self.require(key)
            return float(default)
        return parse_float(e, self.path)

    def int(self, key: str, default: int | None = None) -> int:
        e = self.get(key)
        if e is None:
            if default is None:
                self.require(key)
            return int(default)
        try:
            return int(e.value)
        except ValueError:
            raise ConfigError(f"'{e.key}' expects an integer, got '{e.value}'", self.path, e.line) from None

    def str(self, key: str, default: str | None = None) -> str:
        e = self.get(key)
        if e is None:
            if default is None:
                self.require(key)
            return default
        return e.value

    def bool(self, key: str, default: bool | None = None) -> bool:
        e = self.get(key)
        if e is None:
            if default is None:
                self.require(key)
            return bool(default)
        v = e.value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"'{e.key}' expects a boolean, got '{e.value}'", self.path, e.line)

    def vector(self, key: str, n: int | None = None, default=None) -> np.ndarray:
        e = self.get(key)
        if e is None:
            if default is None:
                self.require(key)
            return np.array(default, dtype=float)
        return parse_vector(e, n, self.path)


@dataclass
class Document:
    sections: list[Section]
    path: str | None = None

    def section(self, name: str) -> Section | None:
        found = [s for s in self.sections if s.name == name]
        if len(found) > 1:
            raise ConfigError(f"duplicate section [{name}]", self.path, found[1].line)
        return found[0] if found else None

    def require(self, name: str) -> Section:
        s = self.section(name)
        if s is None:
            raise ConfigError(f"missing section [{name}]", self.path, 1)
        return s

    def with_prefix(self, prefix: str) -> list[Section]:
        return [s for s in self.sections if s.name.split()[0] == prefix]


def parse_float(e: Entry, path: str | None = None) -> float:
    try:
        v = float(e.value)
    except ValueError:
        raise ConfigError(f"'{e.key}' expects a number, got '{e.value}'", path, e.line) from None
    if not np.isfinite(v):
        raise ConfigError(f"'{e.key}' must be finite", path, e.line)
    return v


def parse_vector(e: Entry, n: int | None = None, path: str | None = None) -> np.ndarray:
    parts = e.value.replace(",", " ").split()
    try:
        v = np.array([float(p) for p in parts])
    except ValueError:
        raise ConfigError(f"'{e.key}' expects numbers, got '{e.value}'", path, e.line) from None
    if n is not None and len(v) != n:
        raise ConfigError(f"'{e.key}' expects {n} values, got {len(v)}", path, e.line)
    if not np.all(np.isfinite(v)):
        raise ConfigError(f"'{e.key}' must be finite", path, e.line)
    return v


def parse_text(text: str, path: str | None = None) -> Document:
    sections: list[Section] = []
    current: Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"bad section header '{raw.strip()}'", path, lineno)
            name = " ".join(line[1:-1].split())
            current = Section(name, lineno, path=path)
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{raw.strip()}'", path, lineno)
        if current is None:
            raise ConfigError("key outside of any [section]", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, lineno)
        current.entries.append(Entry(key, value, lineno))
    return Document(sections, path)


def parse_file(path) -> Document:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc.strerror}", path) from None
    return parse_text(text, path)


def check_keys(section: Section, allowed: set[str]) -> None:
    for e in section.entries:
        if e.key not in allowed:
            raise ConfigError(f"unknown key '{e.key}' in [{section.name}]", section.path, e.line)
