"""Shared helpers used by every subcommand.

The package logger, the error hierarchy the CLI maps onto exit codes,
seed derivation for per-item RNGs, and the small file helpers
(newline-delimited JSON, float formatting, input/output path checks)
that appear across multiple commands.
"""

import hashlib
import json
import logging
import math
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

__all__ = [
    "FLOAT_FORMAT",
    "logger",
    "ShapeError",
    "DomainError",
    "FormatError",
    "ConfigError",
    "NumericError",
    "TrainingError",
    "SamplingError",
    "derive_seed",
    "ensure_output_dir",
    "read_jsonl",
    "write_jsonl",
    "format_float",
    "parse_float",
]


# 17 significant digits is enough to round-trip any IEEE double.
FLOAT_FORMAT = ".17g"


logger = logging.getLogger("scenario_flow")


# --- Errors ------------------------------------------------------------------


class ShapeError(ValueError):
    """Array lengths or shapes do not agree."""


class DomainError(ValueError):
    """A value lies outside the domain an operation is defined on."""


class FormatError(ValueError):
    """A dataset, embedding, checkpoint or report record is malformed."""


class ConfigError(ValueError):
    """A configuration value is invalid or cannot be constructed."""


class NumericError(RuntimeError):
    """A computation produced a non-finite value or failed to converge."""


class TrainingError(NumericError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class SamplingError(NumericError):
    """The ODE state became non-finite during integration."""

    def __init__(self, step: int, message: str):
        super().__init__(f"euler step {step}: {message}")
        self.step = step


# --- Seeds -------------------------------------------------------------------


def derive_seed(seed: int, *parts: object) -> int:
    """Derive a child seed from a parent seed and any identifying parts.

    Stable across platforms and Python versions (no use of ``hash()``),
    so per-prompt and per-scenario RNGs are independent of worker count
    and process layout.
    """
    key = ":".join([str(seed), *(str(p) for p in parts)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


# --- Paths -------------------------------------------------------------------


def ensure_output_dir(raw_path: Path) -> Path:
    """Create the output directory if needed and check it is writable."""
    resolved = Path(raw_path).expanduser().resolve()
    if resolved.exists() and not resolved.is_dir():
        raise OSError(f"Output path is not a directory: {resolved}")
    resolved.mkdir(parents=True, exist_ok=True)
    probe = resolved / ".write-test"
    try:
        probe.write_text("")
    except OSError as e:
        raise OSError(f"Output directory is not writable: {resolved} ({e})") from e
    finally:
        if probe.exists():
            probe.unlink()
    return resolved


# --- Newline-delimited JSON ----------------------------------------------------


def read_jsonl(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield ``(line_number, record)`` for every non-blank line of ``path``."""
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_no}: not valid JSON ({e})") from e
            if not isinstance(record, dict):
                raise FormatError(f"{path}:{line_no}: expected an object")
            yield line_no, record


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> int:
    """Write one JSON object per line; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, allow_nan=False))
            f.write("\n")
            n += 1
    return n


# --- Floats ------------------------------------------------------------------


def format_float(value: float | None) -> str:
    """Format a float for CSV at round-trip precision. None becomes ``NA``."""
    if value is None:
        return "NA"
    return format(float(value), FLOAT_FORMAT)


def parse_float(cell: str) -> float | None:
    """Inverse of :func:`format_float`."""
    cell = cell.strip()
    if cell in ("", "NA"):
        return None
    value = float(cell)
    if not math.isfinite(value):
        raise FormatError(f"non-finite value in report cell: {cell!r}")
    return value
