"""Per-client star-schema warehouse on sqlite.

Dimension rows are keyed by content or chain hashes and written with
``INSERT OR IGNORE``, so replaying an entry never changes them. Fact rows
record one observed contract event each; ``(transaction_hash, event_index)``
is unique across all four fact tables.
"""

from __future__ import annotations

import csv
import io
import sqlite3
import threading
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional, TextIO, Union

SCHEMA_VERSION = 1
DIMENSION_TABLES = ("D_Client", "D_Contract", "D_Block", "D_Transaction", "D_Event_Type", "D_Model", "D_Instance", "D_State")
FACT_TABLES = ("F_Model", "F_Instance", "F_State", "F_Transition")
TABLES = DIMENSION_TABLES + FACT_TABLES

# Fact table receiving each artifact kind; terminations are instance events.
FACT_TABLE = {
    "model": "F_Model",
    "instance": "F_Instance",
    "termination": "F_Instance",
    "state": "F_State",
    "transition": "F_Transition",
}


class WarehouseError(Exception):
    pass


class ReferentialViolation(WarehouseError):
    pass


class DuplicateFact(WarehouseError):
    pass


class WarehouseUnavailable(WarehouseError):
    pass


def schema_sql(version: int = SCHEMA_VERSION) -> str:
    return resources.files(__package__).joinpath(f"schema_v{version}.sql").read_text(encoding="utf-8")


class Warehouse:
    def __init__(self, path: Union[str, Path] = ":memory:") -> None:
        self.path = str(path)
        self._lock = threading.Lock()
        self._conn: Optional[sqlite3.Connection] = None
        self.open()

    # -- connection ------------------------------------------------------------

    def open(self) -> None:
        if self._conn is not None:
            return
        try:
            conn = sqlite3.connect(self.path, check_same_thread=False)
        except sqlite3.Error as exc:
            raise WarehouseUnavailable(str(exc)) from exc
        conn.execute("PRAGMA foreign_keys = ON")
        conn.executescript(schema_sql())
        self._conn = conn

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    reopen = open

    @property
    def conn(self) -> sqlite3.Connection:
        if self._conn is None:
            raise WarehouseUnavailable(f"warehouse {self.path} is closed")
        return self._conn

    def __enter__(self) -> Warehouse:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def schema_version(self) -> int:
        return self.conn.execute("PRAGMA user_version").fetchone()[0]

    def _write(self, statements: list[tuple[str, tuple]]) -> list[int]:
        """Run statements in one transaction; returns per-statement rowcounts."""
        with self._lock:
            conn = self.conn
            try:
                with conn:
                    return [conn.execute(sql, params).rowcount for sql, params in statements]
            except sqlite3.IntegrityError as exc:
                if "FOREIGN KEY" in str(exc):
                    raise ReferentialViolation(str(exc)) from exc
                if "UNIQUE" in str(exc):
                    raise DuplicateFact(str(exc)) from exc
                raise
            except (sqlite3.OperationalError, sqlite3.ProgrammingError) as exc:
                raise WarehouseUnavailable(str(exc)) from exc

    # -- loading ---------------------------------------------------------------

    def register_contract(self, ca_address: str, deployment_address: str, client_id: Optional[str] = None) -> dict[str, int]:
        counts = self._write([
            ("INSERT OR IGNORE INTO D_Client VALUES (?, ?)", (deployment_address, client_id)),
            ("INSERT OR IGNORE INTO D_Contract VALUES (?, ?)", (ca_address, deployment_address)),
        ])
        return dict(zip(("D_Client", "D_Contract"), counts))

    def upsert_dimensions(self, entry, ctx) -> dict[str, int]:
        """Insert any missing parent rows for a verified entry.

        Returns the number of new rows per table; a replay returns all zeros.
        """
        stmts: list[tuple[str, str, tuple]] = [
            ("D_Client", "INSERT OR IGNORE INTO D_Client VALUES (?, ?)", (ctx.deployment_address, ctx.client_id)),
            ("D_Client", "INSERT OR IGNORE INTO D_Client VALUES (?, ?)", (entry.sender, ctx.client_id)),
            ("D_Contract", "INSERT OR IGNORE INTO D_Contract VALUES (?, ?)", (entry.contract, ctx.deployment_address)),
            ("D_Block", "INSERT OR IGNORE INTO D_Block VALUES (?, ?, ?)",
             (entry.block_hash, entry.block_height, entry.block_timestamp)),
            ("D_Transaction", "INSERT OR IGNORE INTO D_Transaction VALUES (?, ?, ?, ?, ?, ?, ?)",
             (entry.transaction_hash, entry.sender, entry.contract, entry.block_hash,
              ctx.fee_units, ctx.fee_unit, ctx.unit_price)),
            ("D_Event_Type",
             "INSERT OR IGNORE INTO D_Event_Type SELECT COALESCE(MAX(event_type_id), 0) + 1, ? FROM D_Event_Type "
             "WHERE NOT EXISTS (SELECT 1 FROM D_Event_Type WHERE event_type_name = ?)",
             (entry.event_type, entry.event_type)),
        ]
        kind = entry.artifact_kind
        if kind == "model":
            stmts.append(("D_Model", "INSERT OR IGNORE INTO D_Model VALUES (?)", (entry.artifact_hash,)))
        elif kind == "instance":
            stmts.append(("D_Instance", "INSERT OR IGNORE INTO D_Instance VALUES (?, ?, ?, ?)",
                          (entry.artifact_hash, entry.model_hash, entry.details.get("guid"), entry.details.get("region"))))
        elif kind == "state":
            stmts.append(("D_State", "INSERT OR IGNORE INTO D_State VALUES (?, ?, ?, ?, ?, ?)",
                          (entry.artifact_hash, entry.instance_hash, entry.state_name, entry.iteration_label,
                           entry.details.get("entered_at"), entry.details.get("exited_at"))))
        counts = self._write([(sql, params) for _, sql, params in stmts])
        out: dict[str, int] = {}
        for (table, _, _), n in zip(stmts, counts):
            out[table] = out.get(table, 0) + max(n, 0)
        return out

    def insert_fact(self, entry, ctx) -> dict[str, Any]:
        """Record one event occurrence in the fact table for its artifact kind."""
        table = FACT_TABLE[entry.artifact_kind]
        if self.has_fact(entry.transaction_hash, entry.event_index):
            raise DuplicateFact(f"{entry.transaction_hash}#{entry.event_index}")
        row: dict[str, Any] = {
            "event_type_id": self.event_type_id(entry.event_type),
            "transaction_hash": entry.transaction_hash,
            "event_index": entry.event_index,
            "timestamp": ctx.observed_at,
        }
        if table == "F_Model":
            row["model_hash"] = entry.artifact_hash
        elif table == "F_Instance":
            row["instance_hash"] = entry.instance_hash
        elif table == "F_State":
            row["state_hash"] = entry.artifact_hash
        else:
            row.update(
                transition_hash=entry.artifact_hash,
                from_state_hash=entry.details["from"],
                to_state_hash=entry.details["to"],
                instance_hash=entry.instance_hash,
            )
        if row["event_type_id"] is None:
            raise ReferentialViolation(f"event type {entry.event_type} not upserted")
        cols = ", ".join(row)
        marks = ", ".join("?" for _ in row)
        self._write([(f"INSERT INTO {table} ({cols}) VALUES ({marks})", tuple(row.values()))])
        return {"table": table, **row}

    def has_fact(self, transaction_hash: str, event_index: int) -> bool:
        union = " UNION ALL ".join(
            f"SELECT 1 FROM {t} WHERE transaction_hash = ? AND event_index = ?" for t in FACT_TABLES
        )
        params = (transaction_hash, event_index) * len(FACT_TABLES)
        return self.conn.execute(union, params).fetchone() is not None

    def event_type_id(self, name: str) -> Optional[int]:
        row = self.conn.execute("SELECT event_type_id FROM D_Event_Type WHERE event_type_name = ?", (name,)).fetchone()
        return row[0] if row else None

    # -- queries -----------------------------------------------------------------

    def _rows(self, sql: str, params: tuple = ()) -> list[dict[str, Any]]:
        cur = self.conn.execute(sql, params)
        names = [d[0] for d in cur.description]
        return [dict(zip(names, r)) for r in cur.fetchall()]

    def query_instance_protocol(self, instance_hash: str) -> list[dict[str, Any]]:
        """The state protocol of one instance in chain order."""
        return self._rows(
            """
            SELECT ROW_NUMBER() OVER (ORDER BY b.block_height, f.event_index, f.rowid) AS position,
                   s.state_name, s.iteration_label, s.entered_at, s.exited_at,
                   b.timestamp AS block_timestamp, b.block_height, f.event_index,
                   f.transaction_hash, s.state_hash
            FROM F_State f
            JOIN D_State s ON s.state_hash = f.state_hash
            JOIN D_Transaction t ON t.transaction_hash = f.transaction_hash
            JOIN D_Block b ON b.block_hash = t.block_hash
            WHERE s.instance_hash = ?
            ORDER BY b.block_height, f.event_index, f.rowid
            """,
            (instance_hash,),
        )

    def query_state_counts(self, model_hash: str) -> list[dict[str, Any]]:
        """Number of state facts per instance of a model, in registration order."""
        return self._rows(
            """
            SELECT i.instance_hash, i.guid,
                   (SELECT COUNT(*) FROM F_State f JOIN D_State s ON s.state_hash = f.state_hash
                    WHERE s.instance_hash = i.instance_hash) AS state_count
            FROM D_Instance i
            WHERE i.model_hash = ?
            ORDER BY i.rowid
            """,
            (model_hash,),
        )

    def query_state_stats(self, model_hash: Optional[str] = None, instance_hash: Optional[str] = None) -> dict[str, Any]:
        """Aggregates over the state facts of one model or one instance."""
        if (model_hash is None) == (instance_hash is None):
            raise ValueError("give exactly one of model_hash or instance_hash")
        if instance_hash is not None:
            where, params = "i.instance_hash = ?", (instance_hash,)
        else:
            where, params = "i.model_hash = ?", (model_hash,)
        row = self._rows(
            f"""
            SELECT COUNT(f.state_hash) AS total_states,
                   COUNT(DISTINCT i.instance_hash) AS instances,
                   AVG(s.exited_at - s.entered_at) AS avg_state_duration_ms,
                   MIN(s.entered_at) AS min_timestamp,
                   MAX(COALESCE(s.exited_at, s.entered_at)) AS max_timestamp
            FROM D_Instance i
            LEFT JOIN D_State s ON s.instance_hash = i.instance_hash
            LEFT JOIN F_State f ON f.state_hash = s.state_hash
            WHERE {where} AND (f.state_hash IS NOT NULL OR s.state_hash IS NULL)
            """,
            params,
        )[0]
        n = row["instances"]
        row["avg_states_per_instance"] = row["total_states"] / n if n else 0.0
        return row

    # -- integrity & export --------------------------------------------------------

    def fk_violations(self) -> list[tuple]:
        return self.conn.execute("PRAGMA foreign_key_check").fetchall()

    def count(self, table: str) -> int:
        if table not in TABLES:
            raise ValueError(f"unknown table {table}")
        return self.conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0]

    def counts(self) -> dict[str, int]:
        return {t: self.count(t) for t in TABLES}

    def dump(self) -> dict[str, list[tuple]]:
        """Every table's rows in insertion order, for row-by-row comparison."""
        return {t: self.conn.execute(f"SELECT * FROM {t} ORDER BY rowid").fetchall() for t in TABLES}


def write_csv(rows: Iterable[dict[str, Any]], out: Union[TextIO, str, Path, None] = None) -> str:
    """Write dict rows as CSV with a header; returns the text."""
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    text = buf.getvalue()
    if isinstance(out, (str, Path)):
        Path(out).write_text(text, encoding="utf-8")
    elif out is not None:
        out.write(text)
    return text


__all__ = [
    "DIMENSION_TABLES", "FACT_TABLES", "FACT_TABLE", "TABLES", "SCHEMA_VERSION",
    "Warehouse", "WarehouseError", "ReferentialViolation", "DuplicateFact", "WarehouseUnavailable",
    "schema_sql", "write_csv",
]
