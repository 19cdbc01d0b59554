"""Deterministic CSV emission: fixed column order, 17 significant digits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

from .errors import PPHomogError

__all__ = ["Table", "write_csv"]


@dataclass
class Table:
    columns: List[str]
    rows: List[list] = field(default_factory=list)

    def append(self, *values):
        if len(values) != len(self.columns):
            raise PPHomogError(f"row width {len(values)} != {len(self.columns)} columns")
        self.rows.append(list(values))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(table: Table, path):
    """Write an RFC-4180 style CSV (CRLF, header row, minimal quoting).

    Reals carry 17 significant digits, so identical runs produce byte
    identical files and values round-trip exactly.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(table.columns)
            for row in table.rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise PPHomogError(f"cannot write CSV {path}: {exc}") from exc
