"""
Configuration utilities.

This module contains environment variable names, ``.env`` loading, the
validating value parsers and the ``key = value`` run-config text reader shared
by the model, training and CLI configuration.
"""

from __future__ import annotations

import enum
import io
import os
import re
from typing import TypeVar

from dotenv import dotenv_values, load_dotenv

from .exceptions import ParseError

ENV_LOG_LEVEL = "GVP_GNN_LOG_LEVEL"
ENV_SEED = "GVP_GNN_SEED"

_E = TypeVar("_E", bound=enum.Enum)

# "key = value", optional trailing comment; keys may be dotted
_CONFIG_LINE = re.compile(r"^\s*[A-Za-z_][A-Za-z0-9_.]*\s*=")


def _load_env_file() -> None:
    """Load environment variables from .env file if it exists."""
    if os.path.exists(".env"):
        load_dotenv(".env")


def _get_env_var(key: str, default: str | None = None) -> str | None:
    """Get an optional environment variable."""
    return os.getenv(key, default)


def _parse_int(key: str, value: str) -> int:
    """Parse an integer config value."""
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"Invalid integer value for {key}: {value}") from None


def _parse_positive_int(key: str, value: str) -> int:
    """Parse an integer that must be at least 1."""
    number = _parse_int(key, value)
    if number < 1:
        raise ValueError(f"{key} must be positive, got {number}")
    return number


def _parse_non_negative_int(key: str, value: str) -> int:
    """Parse an integer that must be at least 0."""
    number = _parse_int(key, value)
    if number < 0:
        raise ValueError(f"{key} must be non-negative, got {number}")
    return number


def _parse_float(key: str, value: str) -> float:
    """Parse a float config value."""
    try:
        return float(value)
    except ValueError:
        raise ValueError(f"Invalid float value for {key}: {value}") from None


def _parse_rate(key: str, value: str) -> float:
    """Parse a rate in [0, 1)."""
    rate = _parse_float(key, value)
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"{key} must be in [0, 1), got {rate}")
    return rate


def _parse_bool(key: str, value: str) -> bool:
    """Parse a boolean config value."""
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Invalid boolean value for {key}: {value}")


def _parse_enum(key: str, value: str, enum_type: type[_E]) -> _E:
    """Parse an enum member from its value (case-insensitive)."""
    lowered = value.strip().lower()
    for member in enum_type:
        if member.value == lowered:
            return member
    choices = ", ".join(str(member.value) for member in enum_type)
    raise ValueError(f"Unsupported {key}: {value} (expected one of {choices})")


def _parse_str_list(value: str) -> tuple[str, ...]:
    """Parse a comma separated list, dropping empty items."""
    return tuple(item.strip() for item in value.split(",") if item.strip())


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a dict.

    Blank lines and ``#`` comments are skipped. Any other line that is not an
    assignment raises a ParseError citing its line number.
    """
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if not _CONFIG_LINE.match(line):
            raise ParseError(f"expected 'key = value', got {stripped!r}", line=number)

    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    result: dict[str, str] = {}
    for key, value in values.items():
        if value is None or not value.strip():
            raise ParseError(f"missing value for {key}")
        result[key] = value.strip()
    return result


def render_config_text(values: dict[str, str]) -> str:
    """Render a dict back to ``key = value`` lines in insertion order."""
    return "".join(f"{key} = {value}\n" for key, value in values.items())
