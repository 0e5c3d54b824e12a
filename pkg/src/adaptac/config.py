"""Flat ``key = value`` configuration files.

Values are Python literals (numbers, strings, tuples, booleans); anything
that does not parse as a literal is kept as a bare string.  Lines starting
with ``#`` are comments.  Later sources override earlier ones: defaults, then
the file, then command-line flags.
"""
from __future__ import annotations

import ast
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key.replace("_", "").replace(".", "").isalnum():
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, list):
            value = tuple(value)
        lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg: dict) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8", newline="\n")


def merge(*sources: dict) -> dict:
    out = {}
    for src in sources:
        out.update({k: v for k, v in src.items() if v is not None})
    return out
