"""Small CSV helpers shared by every file format in the package.

Output files start with ``#`` comment lines (config hash, seed); readers skip
them. Floats are written with ``repr`` so a write/read round trip is exact.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidInput, MissingData

_header_lines: list[str] = []
_written: list[Path] = []


def set_output_header(lines: Sequence[str]) -> None:
    """Set the comment lines prepended to every file written afterwards."""
    _header_lines[:] = list(lines)


def output_header() -> list[str]:
    return list(_header_lines)


def written_paths() -> list[Path]:
    """Files written since the last :func:`reset_written` (for cleanup on failure)."""
    return list(_written)


def reset_written() -> None:
    _written.clear()


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "dtype") and value.dtype.kind == "f":
        return repr(float(value))
    if hasattr(value, "dtype") and value.dtype.kind in "iu":
        return str(int(value))
    return str(value)


def comment_block() -> str:
    return "".join(f"# {line}\n" for line in _header_lines)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(comment_block())
        fh.write(text)
    _written.append(path)
    return path


def write_json(path, obj) -> Path:
    """JSON has no comments, so the header travels inside ``obj`` instead."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _written.append(path)
    return path


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return write_text(path, buf.getvalue())


def strip_comments(lines: Iterable[str]) -> list[str]:
    return [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def read_csv(path, required: Sequence[str]) -> list[dict[str, str]]:
    """Read a CSV with a header row, checking that ``required`` columns exist."""
    path = Path(path)
    if not path.exists():
        raise MissingData(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        body = strip_comments(fh)
    if not body:
        raise InvalidInput(f"{path}: empty table")
    reader = csv.DictReader(body)
    missing = [c for c in required if c not in (reader.fieldnames or [])]
    if missing:
        raise InvalidInput(f"{path}: missing columns {missing}")
    return [dict(row) for row in reader]
