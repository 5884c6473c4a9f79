"""
Console, logging and output writers shared by the CLI and the library.

Every primary output goes through an atomic write (temp file + rename) so a
failing command never leaves a partial file behind.
"""

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from errors import DGMILError

# Diagnostics go to stderr; stdout stays free for piping
console = Console(stderr=True)

PathLike = Union[str, Path]


def configure_logging(quiet: bool = False, verbose: bool = False) -> None:
    """Install a RichHandler on the root logger."""
    level = logging.WARNING if quiet else (logging.DEBUG if verbose else logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=verbose)],
        force=True,
    )


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write bytes to `path` via a sibling temp file and os.replace."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise DGMILError(f"cannot write {path}: {exc.strerror}") from exc
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except OSError as exc:
        Path(tmp_name).unlink(missing_ok=True)
        raise DGMILError(f"cannot write {path}: {exc.strerror}") from exc


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_record(record: Dict[str, Any]) -> str:
    """Canonical one-line JSON (sorted keys) so equal records are equal bytes."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json_lines(path: PathLike, records: Iterable[Dict[str, Any]]) -> None:
    atomic_write_text(path, "".join(dumps_record(r) + "\n" for r in records))


def write_json(path: PathLike, document: Dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n")


def write_csv_table(path: PathLike, frame: pd.DataFrame) -> None:
    """Header row plus one line per frame row; missing values become empty cells."""
    atomic_write_text(path, frame.to_csv(index=False, na_rep="", lineterminator="\n"))


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def print_table(title: str, columns: Sequence[str], rows: Iterable[Sequence[Any]],
                styles: Optional[List[str]] = None) -> None:
    """Render rows as a rich table on the diagnostic console."""
    table = Table(title=title)
    styles = styles or ["cyan"] + ["magenta"] * (len(columns) - 1)
    for column, style in zip(columns, styles):
        table.add_column(column, style=style)
    for row in rows:
        table.add_row(*(_fmt(value) for value in row))
    console.print(table)


def print_summary(title: str, summary: Dict[str, Any]) -> None:
    """Two-column key/value table."""
    print_table(title, ["Field", "Value"], summary.items())
