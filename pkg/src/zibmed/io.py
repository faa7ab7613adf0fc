"""CSV ingestion and result serialisation.

Input layout: a header row with ``y``, ``x`` and ``lib_size`` plus either a
single ``m`` column (one mediator) or one column per taxon.  Machine outputs
carry reals at 17 significant digits so that they round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from zibmed.model import Dataset, ModelError
from zibmed.screen import ScreenResult, TaxaTable

SCHEMA_VERSION = 1
REQUIRED = ("y", "x", "lib_size")
_REAL = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class InputError(ValueError):
    """Malformed input file; carries the 1-based line number and column name."""

    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.column = column
        self.detail = message

    def as_dict(self) -> dict:
        return {"type": "InputError", "message": self.detail, "line": self.line,
                "column": self.column}


def fmt(v) -> str:
    """17-significant-digit text for a real; empty for None/NaN."""
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return ""
    return format(v, ".17g")


def _parse_real(text: str, line: int, column: str) -> float:
    s = text.strip()
    if s == "":
        raise InputError("missing value", line, column)
    if not _REAL.match(s):
        raise InputError(f"not a decimal number: {text!r}", line, column)
    return float(s)


def ingest_csv(path) -> Dataset | TaxaTable:
    """Read a subject table; a lone ``m`` column gives a Dataset, taxa give a TaxaTable."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise InputError(f"file is not UTF-8: {exc}") from None
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise InputError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    for col in REQUIRED:
        if col not in header:
            raise InputError(f"required column '{col}' missing", 1)
    if len(set(header)) != len(header):
        raise InputError("duplicate column names", 1)
    extra = [h for h in header if h not in REQUIRED]
    if not extra:
        raise InputError("no mediator column (expected 'm' or taxon columns)", 1)
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if any(c.strip() for c in r)]
    if not body:
        raise InputError("no data rows", 2)

    values = {h: [] for h in header}
    for line, row in body:
        if len(row) != len(header):
            raise InputError(f"expected {len(header)} fields, found {len(row)}", line)
        for h, cell in zip(header, row):
            v = _parse_real(cell, line, h)
            if h == "lib_size":
                if v != int(v) or v < 1:
                    raise InputError(f"library size must be a positive integer: {cell!r}",
                                     line, h)
            elif h not in ("y", "x") and not 0.0 <= v < 1.0:
                raise InputError(f"relative abundance must lie in [0, 1): {cell!r}", line, h)
            elif not math.isfinite(v):
                raise InputError("value must be finite", line, h)
            values[h].append(v)

    y = np.array(values["y"])
    x = np.array(values["x"])
    lib = np.array(values["lib_size"], dtype=np.int64)
    try:
        if extra == ["m"]:
            return Dataset(y, np.array(values["m"]), x, lib)
        ab = np.column_stack([values[h] for h in extra])
        sums = ab.sum(axis=1)
        over = np.flatnonzero(sums > 1.0 + 1e-9)
        if over.size:
            raise InputError(f"relative abundances sum to {sums[over[0]]:.6g} > 1",
                             body[over[0]][0])
        return TaxaTable(y, x, lib, ab, taxa=extra)
    except ModelError as exc:
        raise InputError(str(exc)) from None


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------

def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else
                        ("" if v is None else v) for v in row])


def write_dataset_csv(path, data: Dataset | TaxaTable) -> None:
    if isinstance(data, Dataset):
        write_csv(path, ["y", "x", "lib_size", "m"],
                  ([float(a), float(b), int(c), float(d)]
                   for a, b, c, d in zip(data.y, data.x, data.lib_size, data.m)))
        return
    write_csv(path, ["y", "x", "lib_size", *data.taxa],
              ([float(a), float(b), int(c), *map(float, ab)]
               for a, b, c, ab in zip(data.y, data.x, data.lib_size, data.abundance)))


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite reals to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, payload: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **payload}
    text = json.dumps(_clean(doc), indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# heatmap
# --------------------------------------------------------------------------

def heatmap_matrix(result: ScreenResult, table: TaxaTable):
    """Rows for taxa flagged on NIE1: sign(NIE1) * (1 - p) where present, None where absent."""
    col = {t: j for j, t in enumerate(table.taxa)}
    out = []
    for r in result.rows:
        if not r.significant.get("nie1", False):
            continue
        e = r.effects.nie1
        s = float(np.sign(e.estimate)) * (1.0 - e.p_value)
        present = table.abundance[:, col[r.taxon]] > 0
        out.append((r.taxon, [s if p else None for p in present]))
    return out


def export_heatmap(result: ScreenResult, table: TaxaTable, path) -> None:
    samples = [f"sample{i + 1}" for i in range(table.n)]
    write_csv(path, ["taxon", *samples],
              ([name, *cells] for name, cells in heatmap_matrix(result, table)))
