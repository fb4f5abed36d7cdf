"""CSV/JSON output with a fixed, reproducible dialect.

Comma separated, ``.`` decimal, header row, LF line endings, floats written
with 17 significant digits so values round-trip exactly.  An optional first
line ``# config_sha256=<hash>`` ties the file to the config that produced it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np

HASH_PREFIX = "# config_sha256="


def fmt_float(x: float) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    return format(x, ".17g")


def _cell(v: Any) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return fmt_float(v)


def write_rows(path: str | Path, rows: Iterable[Iterable[Any]], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment is not None:
            fh.write(f"{HASH_PREFIX}{header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_columns(path: str | Path, columns: dict[str, Any], header_comment: str | None = None) -> None:
    names = list(columns)
    arrays = [np.asarray(columns[n]).ravel() for n in names]
    length = max(len(a) for a in arrays)
    rows = [names]
    for i in range(length):
        rows.append([a[i] if i < len(a) else "" for a in arrays])
    write_rows(path, rows, header_comment=header_comment)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def config_hash(config: Any) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def embedded_hash(path: str | Path) -> str | None:
    """Config hash embedded in the first line of an artifact, if any."""
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
    if first.startswith(HASH_PREFIX):
        return first[len(HASH_PREFIX):]
    if path and str(path).endswith(".json"):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError:
            return None
        if isinstance(data, dict):
            return data.get("config_sha256")
    return None


def _json_default(o: Any):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_table(path: str | Path) -> list[list[str]]:
    """Rows of a CSV artifact, skipping ``#`` comment lines."""
    with open(path, newline="") as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))
