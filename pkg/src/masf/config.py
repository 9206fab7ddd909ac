"""Plain-text ``key=value`` config files with ``#`` comments."""

from __future__ import annotations

from pathlib import Path


def parse_key_values(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def read_key_values(path) -> dict[str, str]:
    return parse_key_values(Path(path).read_text(encoding="utf-8"))


def parse_floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def parse_ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())
