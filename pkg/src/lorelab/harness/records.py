"""CSV and manifest output; every file is written atomically."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .checkpoint import write_atomic


def _cell(v):
    if isinstance(v, float | np.floating):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return v


def csv_text(header: list[str], rows: list, comment: str | None = None) -> str:
    """RFC-4180 text; ``rows`` are dicts keyed by header or plain sequences.

    ``comment`` becomes a leading ``# ...`` line, used to stamp the attack
    configuration above robust-accuracy columns.
    """
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\r\n")
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(header)
    for row in rows:
        values = [row[h] for h in header] if isinstance(row, dict) else list(row)
        if len(values) != len(header):
            raise ValueError(f"row has {len(values)} cells, header has {len(header)}")
        writer.writerow([_cell(v) for v in values])
    return buf.getvalue()


def write_csv(path, header, rows, comment=None) -> Path:
    write_atomic(path, csv_text(header, rows, comment))
    return Path(path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines(keepends=True) if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, list | tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    return v


def write_manifest(path, manifest: dict) -> Path:
    write_atomic(path, json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return Path(path)
