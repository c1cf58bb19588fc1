"""Rendering of query results as aligned tables, CSV or JSON."""

from __future__ import annotations

import json
from typing import Any, Iterable, Sequence

from .canonical import abbreviate
from .warehouse import write_csv

FORMATS = ("table", "csv", "json")

# Columns holding hashes or addresses; shortened in tables only.
HASH_COLUMNS = frozenset({
    "transaction_hash", "state_hash", "instance_hash", "model_hash", "block_hash",
    "artifact_hash", "contract", "sender", "client_address", "ca_address",
})


def _short(value: Any) -> str:
    if value is None:
        return ""
    text = str(value)
    body = text[2:] if text.startswith("0x") else text
    if len(body) >= 40 and all(ch in "0123456789abcdef" for ch in body):
        return ("0x" if text.startswith("0x") else "") + abbreviate(body)
    return text


def render_table(rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None, abbreviate_hashes: bool = True) -> str:
    if not rows:
        return "(no rows)\n"
    columns = list(columns or rows[0].keys())
    cells = [
        [_short(r.get(c)) if abbreviate_hashes and c in HASH_COLUMNS else ("" if r.get(c) is None else str(r.get(c))) for c in columns]
        for r in rows
    ]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render(rows: Iterable[dict[str, Any]], fmt: str = "table", columns: Sequence[str] | None = None) -> str:
    rows = list(rows)
    if columns is not None:
        rows = [{c: r.get(c) for c in columns} for r in rows]
    if fmt == "table":
        return render_table(rows, columns)
    if fmt == "csv":
        return write_csv(rows)
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=False) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def render_record(record: dict[str, Any], fmt: str = "table") -> str:
    """A single key/value record (e.g. aggregate statistics)."""
    if fmt == "json":
        return json.dumps(record, indent=2) + "\n"
    if fmt == "csv":
        return write_csv([record])
    width = max(len(k) for k in record) if record else 0
    return "".join(f"{k.ljust(width)}  {'' if v is None else v}\n" for k, v in record.items())


PROTOCOL_COLUMNS = ("position", "state_name", "iteration_label", "entered_at", "block_timestamp", "block_height", "transaction_hash", "state_hash")
COUNT_COLUMNS = ("instance_hash", "guid", "state_count")
