"""CSV/JSON report helpers. Every report can carry ``# key=value`` preamble
lines so that the producing configuration travels with the data."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Iterable, Sequence


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]],
              preamble: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns))
    for r in rows:
        w.writerow(list(r))
    path.write_text(buf.getvalue())
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    """(preamble lines without the ``# `` prefix, data rows as dicts)."""
    lines = Path(path).read_text().splitlines()
    pre = [l[2:] if l.startswith("# ") else l[1:] for l in lines if l.startswith("#")]
    body = [l for l in lines if not l.startswith("#")]
    return pre, list(csv.DictReader(body))


def csv_columns(path: str | Path) -> list[str]:
    body = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    if not body:
        return []
    return next(csv.reader([body[0]]))


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def float_cell(x: float, digits: int = 6) -> str:
    return f"{x:.{digits}f}"
