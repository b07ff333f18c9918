"""Database interface, execution-based equivalence oracle and shared types."""

from __future__ import annotations

import datetime
import decimal
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Sequence

from quite.core import CostEstimate, SqlQuery
from quite.db.plan import PlanTree

FLOAT_REL_TOL = 1e-9
DEFAULT_LATENCY_CAP = 300.0


class DbError(Exception):
    pass


class ConnectionFailed(DbError):
    pass


class SyntaxRejected(DbError):
    """The server refused to parse the statement. `server_message` carries
    the verbatim error text for the corrector."""

    def __init__(self, server_message: str):
        super().__init__(server_message)
        self.server_message = server_message


class ExecutionFailed(DbError):
    pass


class UnknownTable(DbError):
    pass


@dataclass(frozen=True)
class DbConfig:
    host: str = "localhost"
    port: int = 5432
    database: str = "postgres"
    user: str = "postgres"
    password: str = ""
    statement_timeout_seconds: float = DEFAULT_LATENCY_CAP

    def __post_init__(self) -> None:
        if self.statement_timeout_seconds <= 0:
            raise ValueError("statement_timeout_seconds must be positive")


@dataclass(frozen=True)
class TimedRun:
    latency_seconds: float
    timed_out: bool
    row_count: int


@dataclass
class ColumnStats:
    n_distinct: Optional[float] = None
    most_common_values: list = field(default_factory=list)
    most_common_freqs: list[float] = field(default_factory=list)


@dataclass
class TableStats:
    row_count: float
    page_count: float = 0.0


@dataclass
class StatsSnapshot:
    """Catalog-derived statistics; never built by scanning user data."""

    tables: dict[str, TableStats] = field(default_factory=dict)
    columns: dict[tuple[str, str], ColumnStats] = field(default_factory=dict)
    indexes: dict[str, list[str]] = field(default_factory=dict)

    def render(self) -> str:
        lines = []
        for name in sorted(self.tables):
            t = self.tables[name]
            idx = ", ".join(self.indexes.get(name, [])) or "none"
            lines.append(
                f"table {name}: ~{t.row_count:.0f} rows, {t.page_count:.0f} pages, indexes: {idx}"
            )
        return "\n".join(lines)


class Database(ABC):
    """One connection to a target engine.

    Implementations must make `explain` side-effect free (plan only, no user
    data read) and `execute` return (column_names, rows).
    """

    @abstractmethod
    def explain(self, q: SqlQuery) -> tuple[PlanTree, CostEstimate]: ...

    @abstractmethod
    def execute(self, q: SqlQuery, cap: Optional[float] = None) -> tuple[list[str], list[tuple]]: ...

    @abstractmethod
    def snapshot_stats(self, tables: Sequence[str]) -> StatsSnapshot: ...

    @abstractmethod
    def ddl_for(self, tables: Sequence[str]) -> str:
        """CREATE TABLE text for the given tables (for external verifiers)."""

    @abstractmethod
    def clear_caches(self) -> None:
        """Best-effort cache clearing between measured runs."""

    @abstractmethod
    def close(self) -> None: ...

    def supports_pg_hint_plan(self) -> bool:
        return False

    # -- timed execution -------------------------------------------------

    def timed_execute(
        self,
        q: SqlQuery,
        warmups: int = 1,
        runs: int = 3,
        cap: float = DEFAULT_LATENCY_CAP,
    ) -> list[TimedRun]:
        """Run `warmups` unmeasured executions then `runs` measured ones.

        A run exceeding `cap` is cancelled and recorded as (cap,
        timed_out=True). Always returns exactly `runs` measurements.
        """
        import time

        for _ in range(warmups):
            try:
                self.execute(q, cap=cap)
            except ExecutionFailed:
                break  # a failing warmup will fail identically when measured
        results: list[TimedRun] = []
        for _ in range(runs):
            self.clear_caches()
            start = time.perf_counter()
            try:
                _, rows = self.execute(q, cap=cap)
                results.append(
                    TimedRun(
                        latency_seconds=time.perf_counter() - start,
                        timed_out=False,
                        row_count=len(rows),
                    )
                )
            except TimeoutCancelled:
                results.append(TimedRun(latency_seconds=cap, timed_out=True, row_count=0))
        return results


class TimeoutCancelled(ExecutionFailed):
    """A statement was cancelled because it exceeded the latency cap."""


_ORDER_BY_RE = re.compile(r"\border\s+by\b", re.IGNORECASE)


def _strip_strings_and_comments(sql: str) -> str:
    out = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if ch == "'":
            i += 1
            while i < n:
                if sql[i] == "'" and i + 1 < n and sql[i + 1] == "'":
                    i += 2
                    continue
                if sql[i] == "'":
                    i += 1
                    break
                i += 1
            out.append(" ")
        elif ch == '"':
            i += 1
            while i < n and sql[i] != '"':
                i += 1
            i += 1
            out.append(" ")
        elif sql.startswith("--", i):
            while i < n and sql[i] != "\n":
                i += 1
        elif sql.startswith("/*", i):
            i += 2
            while i < n and not sql.startswith("*/", i):
                i += 1
            i += 2
            out.append(" ")
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def has_top_level_order_by(sql: str) -> bool:
    """True when the statement carries an ORDER BY at paren depth zero
    (string literals, quoted identifiers and comments ignored)."""
    clean = _strip_strings_and_comments(sql)
    depth = 0
    for m in re.finditer(r"\(|\)|\border\s+by\b", clean, re.IGNORECASE):
        tok = m.group(0)
        if tok == "(":
            depth += 1
        elif tok == ")":
            depth -= 1
        elif depth == 0:
            return True
    return False


def _normalize_cell(value):
    """Map a result cell onto a comparison key: numeric family unified,
    temporal values ISO-formatted, everything else left as-is."""
    if value is None:
        return None
    if isinstance(value, bool):
        return float(value)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, decimal.Decimal):
        return float(value)
    if isinstance(value, (datetime.date, datetime.datetime, datetime.time)):
        return value.isoformat()
    if isinstance(value, (bytes, memoryview)):
        return bytes(value)
    return value


def _cells_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, float) and isinstance(b, float):
        if math.isnan(a) and math.isnan(b):
            return True
        return math.isclose(a, b, rel_tol=FLOAT_REL_TOL, abs_tol=1e-12)
    if type(a) is not type(b):
        return str(a) == str(b)
    return a == b


def _row_sort_key(row: tuple):
    key = []
    for cell in row:
        if cell is None:
            key.append((0, ""))
        elif isinstance(cell, float):
            key.append((1, cell))
        elif isinstance(cell, bytes):
            key.append((2, cell.hex()))
        else:
            key.append((3, str(cell)))
    return key


@dataclass(frozen=True)
class ComparisonResult:
    equal: bool
    reason: str = ""


def compare_results(db: Database, a: SqlQuery, b: SqlQuery, cap: float = DEFAULT_LATENCY_CAP) -> ComparisonResult:
    """Execute both queries and compare outputs.

    Rows are compared as multisets unless *both* queries end in a top-level
    ORDER BY, in which case order matters. Numeric cells compare with
    relative tolerance 1e-9. Any execution failure yields a non-equal
    verdict with the reason recorded.
    """
    try:
        _, rows_a = db.execute(a, cap=cap)
    except DbError as exc:
        return ComparisonResult(False, f"left query failed: {exc}")
    try:
        _, rows_b = db.execute(b, cap=cap)
    except DbError as exc:
        return ComparisonResult(False, f"right query failed: {exc}")

    norm_a = [tuple(_normalize_cell(c) for c in row) for row in rows_a]
    norm_b = [tuple(_normalize_cell(c) for c in row) for row in rows_b]
    if len(norm_a) != len(norm_b):
        return ComparisonResult(False, f"row count mismatch: {len(norm_a)} vs {len(norm_b)}")
    if norm_a and len(norm_a[0]) != len(norm_b[0]):
        return ComparisonResult(
            False, f"column count mismatch: {len(norm_a[0])} vs {len(norm_b[0])}"
        )

    ordered = has_top_level_order_by(a.text) and has_top_level_order_by(b.text)
    if not ordered:
        norm_a = sorted(norm_a, key=_row_sort_key)
        norm_b = sorted(norm_b, key=_row_sort_key)
    for i, (ra, rb) in enumerate(zip(norm_a, norm_b)):
        for ca, cb in zip(ra, rb):
            if not _cells_equal(ca, cb):
                return ComparisonResult(False, f"row {i} differs: {ra!r} vs {rb!r}")
    return ComparisonResult(True)


def results_equal(db: Database, a: SqlQuery, b: SqlQuery, cap: float = DEFAULT_LATENCY_CAP) -> bool:
    return compare_results(db, a, b, cap=cap).equal


_TABLE_RE = re.compile(r"\b(?:from|join|into|update)\s+([a-zA-Z_][\w.]*)", re.IGNORECASE)
_SQL_NON_TABLES = {"select", "lateral", "unnest", "values", "generate_series"}


def referenced_tables(sql: str) -> list[str]:
    """Best-effort list of base table names referenced by a statement.
    CTE names defined in the statement itself are excluded."""
    clean = _strip_strings_and_comments(sql)
    ctes = {
        m.group(1).lower()
        for m in re.finditer(r"(?:\bwith\b|,)\s*([a-zA-Z_]\w*)\s+as\s*\(", clean, re.IGNORECASE)
    }
    seen: list[str] = []
    for m in _TABLE_RE.finditer(clean):
        name = m.group(1).split(".")[-1].lower()
        if name in ctes or name in _SQL_NON_TABLES:
            continue
        if name not in seen:
            seen.append(name)
    return seen


def connect(dsn: str, config: Optional[DbConfig] = None) -> Database:
    """Open a backend for a DSN.

    Schemes: postgresql:// or postgres:// for the live backend;
    sqlite:///path (or sqlite:///:memory:) for the embedded desk engine.
    """
    if dsn.startswith(("postgresql://", "postgres://")):
        from quite.db.postgres import PostgresDatabase

        return PostgresDatabase(dsn, config=config)
    if dsn.startswith("sqlite://"):
        from quite.db.embedded import EmbeddedDatabase

        # sqlite:///rel.db is relative, sqlite:////abs/p.db absolute,
        # sqlite:///:memory: in-memory (SQLAlchemy convention).
        path = dsn[len("sqlite://"):]
        if path.startswith("/"):
            path = path[1:]
        if path in ("", ":memory:"):
            path = ":memory:"
        return EmbeddedDatabase(path, config=config)
    raise ValueError(f"unsupported DSN scheme: {dsn!r}")
