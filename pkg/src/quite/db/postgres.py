"""Live PostgreSQL backend.

Talks DB-API (psycopg2 or psycopg) and implements the `Database` surface:
EXPLAIN (FORMAT JSON) plans, per-session statement_timeout, catalog-only
statistics, and DISCARD ALL between measured runs (an external restart hook
can be supplied where full cache clearing is required; restarting the
server needs privileges a library cannot assume).

The driver is imported lazily so the rest of the package works without it;
install the `postgres` extra to enable this backend.
"""

from __future__ import annotations

import json
from typing import Callable, Optional, Sequence

from quite.core import CostEstimate, CostSource, SqlQuery
from quite.db.base import (
    ConnectionFailed,
    Database,
    DbConfig,
    ExecutionFailed,
    StatsSnapshot,
    SyntaxRejected,
    TableStats,
    TimeoutCancelled,
    UnknownTable,
    ColumnStats,
)
from quite.db.plan import PlanTree, parse_explain_json

_QUERY_CANCELED = "57014"


def _load_driver():
    try:
        import psycopg2

        return psycopg2
    except ImportError:
        pass
    try:
        import psycopg

        return psycopg
    except ImportError:
        raise ConnectionFailed(
            "no PostgreSQL driver installed; pip install 'quite[postgres]'"
        )


def _sqlstate(exc) -> Optional[str]:
    code = getattr(exc, "pgcode", None) or getattr(exc, "sqlstate", None)
    if code:
        return code
    diag = getattr(exc, "diag", None)
    return getattr(diag, "sqlstate", None) if diag else None


class PostgresDatabase(Database):
    def __init__(
        self,
        dsn: str,
        config: Optional[DbConfig] = None,
        driver=None,
        restart_hook: Optional[Callable[[], None]] = None,
    ):
        self._config = config or DbConfig()
        self._driver = driver or _load_driver()
        self._restart_hook = restart_hook
        try:
            self._conn = self._driver.connect(dsn)
            self._conn.autocommit = True
        except Exception as exc:
            raise ConnectionFailed(str(exc))
        self._current_timeout_ms: Optional[int] = None
        self._set_timeout(self._config.statement_timeout_seconds)

    # -- plumbing ---------------------------------------------------------

    def _cursor(self):
        try:
            return self._conn.cursor()
        except Exception as exc:
            raise ConnectionFailed(str(exc))

    def _set_timeout(self, seconds: Optional[float]) -> None:
        ms = int((seconds or self._config.statement_timeout_seconds) * 1000)
        if ms == self._current_timeout_ms:
            return
        cur = self._cursor()
        try:
            cur.execute(f"SET statement_timeout = {ms}")
            self._current_timeout_ms = ms
        finally:
            cur.close()

    def close(self) -> None:
        try:
            self._conn.close()
        except Exception:
            pass

    def clear_caches(self) -> None:
        if self._restart_hook is not None:
            self._restart_hook()
            return
        cur = self._cursor()
        try:
            cur.execute("DISCARD ALL")
            # DISCARD ALL resets session GUCs, including statement_timeout.
            self._current_timeout_ms = None
        finally:
            cur.close()

    # -- core surface -------------------------------------------------------

    def explain(self, q: SqlQuery) -> tuple[PlanTree, CostEstimate]:
        cur = self._cursor()
        try:
            cur.execute("EXPLAIN (FORMAT JSON) " + q.text)
            row = cur.fetchone()
        except Exception as exc:
            if self._is_connection_error(exc):
                raise ConnectionFailed(str(exc))
            raise SyntaxRejected(str(exc).strip())
        finally:
            cur.close()
        doc = row[0]
        if isinstance(doc, str):
            doc = json.loads(doc)
        tree = parse_explain_json(doc)
        cost = CostEstimate(
            total_cost=tree.root.total_cost,
            startup_cost=tree.root.startup_cost,
            source=CostSource.EXPLAIN,
        )
        return tree, cost

    def execute(self, q: SqlQuery, cap: Optional[float] = None) -> tuple[list[str], list[tuple]]:
        self._set_timeout(cap)
        cur = self._cursor()
        try:
            cur.execute(q.text)
            rows = cur.fetchall() if cur.description else []
            cols = [d[0] for d in cur.description] if cur.description else []
            return cols, [tuple(r) for r in rows]
        except Exception as exc:
            if _sqlstate(exc) == _QUERY_CANCELED or "statement timeout" in str(exc):
                raise TimeoutCancelled(str(exc))
            if self._is_connection_error(exc):
                raise ConnectionFailed(str(exc))
            raise ExecutionFailed(str(exc))
        finally:
            cur.close()

    def snapshot_stats(self, tables: Sequence[str]) -> StatsSnapshot:
        snap = StatsSnapshot()
        cur = self._cursor()
        try:
            for name in tables:
                cur.execute(
                    "SELECT reltuples, relpages FROM pg_class "
                    "WHERE relname = %s AND relkind IN ('r', 'p', 'm')",
                    (name,),
                )
                row = cur.fetchone()
                if row is None:
                    raise UnknownTable(name)
                snap.tables[name] = TableStats(
                    row_count=max(0.0, float(row[0])), page_count=float(row[1])
                )
                cur.execute(
                    "SELECT attname, n_distinct, most_common_vals::text, most_common_freqs "
                    "FROM pg_stats WHERE tablename = %s",
                    (name,),
                )
                for attname, n_distinct, mcv, mcf in cur.fetchall():
                    snap.columns[(name, attname)] = ColumnStats(
                        n_distinct=float(n_distinct) if n_distinct is not None else None,
                        most_common_values=[mcv] if mcv else [],
                        most_common_freqs=list(mcf) if mcf else [],
                    )
                cur.execute(
                    "SELECT indexname FROM pg_indexes WHERE tablename = %s", (name,)
                )
                snap.indexes[name] = [r[0] for r in cur.fetchall()]
        finally:
            cur.close()
        return snap

    def ddl_for(self, tables: Sequence[str]) -> str:
        cur = self._cursor()
        parts = []
        try:
            for name in tables:
                cur.execute(
                    "SELECT column_name, data_type, is_nullable "
                    "FROM information_schema.columns WHERE table_name = %s "
                    "ORDER BY ordinal_position",
                    (name,),
                )
                cols = cur.fetchall()
                if not cols:
                    raise UnknownTable(name)
                rendered = ",\n".join(
                    f"  {c} {t}{'' if nullable == 'YES' else ' NOT NULL'}"
                    for c, t, nullable in cols
                )
                parts.append(f"CREATE TABLE {name} (\n{rendered}\n);")
        finally:
            cur.close()
        return "\n".join(parts)

    def supports_pg_hint_plan(self) -> bool:
        """Capability probe: is the pg_hint_plan extension usable here?"""
        cur = self._cursor()
        try:
            try:
                cur.execute("SHOW pg_hint_plan.enable_hint")
                return True
            except Exception:
                pass
            try:
                cur.execute("LOAD 'pg_hint_plan'")
                cur.execute("SHOW pg_hint_plan.enable_hint")
                return True
            except Exception:
                return False
        finally:
            cur.close()

    @staticmethod
    def _is_connection_error(exc) -> bool:
        name = type(exc).__name__
        if name in ("InterfaceError", "ConnectionException", "OperationalError"):
            # OperationalError also covers server-side errors; only treat it
            # as a connection problem when the message says so.
            msg = str(exc).lower()
            if name != "OperationalError":
                return True
            return any(
                marker in msg
                for marker in ("connection", "could not connect", "server closed", "terminat")
            )
        return False
