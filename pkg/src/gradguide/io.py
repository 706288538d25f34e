"""Atomic file output and the CSV conventions shared by every command."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

__all__ = ["atomic_write_text", "config_hash", "format_value", "write_csv", "csv_text"]


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def format_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if hasattr(v, "item"):  # numpy scalar, including np.float64 which subclasses float
        return format_value(v.item())
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence[Any]], comment: str | None = None) -> str:
    lines = []
    if comment is not None:
        lines.append(f"# {comment}")
    lines.append(",".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} fields, expected {len(columns)}")
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]],
              config: Any = None) -> None:
    """CSV with a ``# config=<hash>`` comment line and a header row."""
    comment = f"config={config_hash(config)}" if config is not None else None
    atomic_write_text(path, csv_text(columns, rows, comment))
