"""Plain-text ``key = value`` configuration with optional ``[section]`` blocks."""

from __future__ import annotations

import re

from .core import KeyspaceError


class ParseError(KeyspaceError):
    def __init__(self, msg: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


_SIZE = re.compile(r"^(\d+)\s*([KMG]?)B?$", re.I)
_TIME = re.compile(r"^(\d+(?:\.\d+)?)\s*(us|ms|s)?$")
_SIZE_MULT = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}
_TIME_MULT = {None: 1, "us": 1, "ms": 1000, "s": 1_000_000}


def parse_size(text: str) -> int:
    m = _SIZE.match(text.strip())
    if not m:
        raise ValueError(f"bad size {text!r}")
    return int(m.group(1)) * _SIZE_MULT[m.group(2).upper()]


def parse_duration(text: str, default_unit: str | None = None) -> int:
    """Duration in integer microseconds; bare numbers use ``default_unit``."""
    m = _TIME.match(text.strip())
    if not m:
        raise ValueError(f"bad duration {text!r}")
    unit = m.group(2) or default_unit
    return int(round(float(m.group(1)) * _TIME_MULT[unit]))


def parse_sections(text: str) -> list[tuple[str, dict[str, tuple[str, int]]]]:
    """Split into ``[(section, {key: (value, line)})]``; the first section is ``""``.

    Sections may repeat (one block per partition or crash).
    """
    sections: list[tuple[str, dict]] = [("", {})]
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip(), {}))
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        body = sections[-1][1]
        if key in body:
            raise ParseError(f"duplicate key {key!r}", lineno)
        body[key] = (value, lineno)
    return sections
