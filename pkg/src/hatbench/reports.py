"""CSV / JSON serialization of report rows. Schemas are versioned."""
from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Sequence

SCHEMA_VERSION = 1

FLOP_COLUMNS = ("attn", "H", "k", "d", "L", "analytical_macs", "instrumented_macs",
                "ratio_to_full", "extra_factor")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def to_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def to_json(kind: str, rows: Iterable[dict], **extra) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **extra, "rows": list(rows)}
    return json.dumps(doc, indent=2, sort_keys=False)
