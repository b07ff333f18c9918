"""Embedded desk-scale engine backed by SQLite.

Implements the same `Database` surface as the PostgreSQL backend so the
whole pipeline (equivalence oracle, timed runs, plan-driven agents, hint
plumbing) can run hermetically in tests and demos. `explain` synthesizes an
EXPLAIN-FORMAT-JSON-shaped document from SQLite's EXPLAIN QUERY PLAN output
plus catalog row estimates, then feeds it through the shared plan parser;
costs are a deterministic heuristic, good enough to rank candidates.

A `pg_sleep(seconds)` SQL function is registered (returns NULL, like the
PostgreSQL builtin's void) so latency fixtures behave the same on both
backends. Sleeps are cooperative and honor the statement cap.
"""

from __future__ import annotations

import math
import re
import sqlite3
import threading
import time
from typing import Optional, Sequence

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
    _strip_strings_and_comments,
)
from quite.db.plan import PlanTree, parse_explain_json

DEFAULT_ROW_ESTIMATE = 1000.0

_SYNTAX_MARKERS = ("syntax error", "incomplete input", "unrecognized token")

_SEARCH_RE = re.compile(r"^SEARCH (\S+)(?: USING( COVERING)? INDEX (\S+))?", re.IGNORECASE)
_SCAN_RE = re.compile(r"^SCAN (\S+)(?: USING( COVERING)? INDEX (\S+))?", re.IGNORECASE)
_MATERIALIZE_RE = re.compile(r"^MATERIALIZE (\S+)", re.IGNORECASE)
_SUBQUERY_RE = re.compile(r"^(CORRELATED )?(?:SCALAR SUBQUERY|LIST SUBQUERY|SUBQUERY) (\d+)", re.IGNORECASE)
_COROUTINE_RE = re.compile(r"^CO-ROUTINE (\S+)", re.IGNORECASE)

_CLAUSE_END_RE = re.compile(
    r"\b(where|group\s+by|order\s+by|having|limit|window|union|intersect|except)\b",
    re.IGNORECASE,
)
_JOIN_NOISE = {"on", "using", "join", "inner", "left", "right", "full", "cross", "natural", "as"}


def _alias_map(sql: str) -> dict[str, str]:
    """Best-effort alias -> table mapping from the FROM/JOIN clauses."""
    clean = _strip_strings_and_comments(sql)
    amap: dict[str, str] = {}
    for m in re.finditer(r"\bfrom\b", clean, re.IGNORECASE):
        seg = clean[m.end():]
        end = _CLAUSE_END_RE.search(seg)
        if end:
            seg = seg[: end.start()]
        for item in re.finditer(
            r"(?:^|,|\bjoin\b)\s*([a-zA-Z_][\w.]*)(?:\s+(?:as\s+)?([a-zA-Z_]\w*))?",
            seg,
            re.IGNORECASE,
        ):
            table = item.group(1).split(".")[-1].lower()
            alias = item.group(2)
            if alias and alias.lower() in _JOIN_NOISE:
                alias = None
            amap[table] = table
            if alias:
                amap[alias.lower()] = table
    return amap


def _cte_names(sql: str) -> set[str]:
    clean = _strip_strings_and_comments(sql)
    return {
        m.group(1).lower()
        for m in re.finditer(
            r"(?:\bwith\b|,)\s*([a-zA-Z_]\w*)(?:\s*\([^)]*\))?\s+as\s*(?:not\s+)?(?:materialized\s*)?\(",
            clean,
            re.IGNORECASE,
        )
    }


class _RawNode:
    __slots__ = ("nid", "detail", "children")

    def __init__(self, nid: int, detail: str):
        self.nid = nid
        self.detail = detail
        self.children: list["_RawNode"] = []


class EmbeddedDatabase(Database):
    def __init__(self, path: str = ":memory:", config: Optional[DbConfig] = None):
        self._config = config or DbConfig()
        try:
            self._conn = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        except sqlite3.Error as exc:
            raise ConnectionFailed(str(exc))
        self._lock = threading.RLock()
        self._cancel = threading.Event()
        self._conn.create_function("pg_sleep", 1, self._pg_sleep)

    # -- plumbing ---------------------------------------------------------

    def _pg_sleep(self, seconds) -> None:
        deadline = time.monotonic() + float(seconds)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            if self._cancel.is_set():
                raise InterruptedError("statement cancelled")
            time.sleep(min(0.01, remaining))

    def execute_script(self, script: str) -> None:
        """Run a multi-statement script (seeding/DDL)."""
        with self._lock:
            self._conn.executescript(script)

    def analyze(self) -> None:
        """Refresh catalog statistics (row estimates for explain/stats)."""
        with self._lock:
            self._conn.execute("ANALYZE")

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def clear_caches(self) -> None:
        # No page-cache control in SQLite worth exercising at desk scale.
        return None

    # -- execution --------------------------------------------------------

    def execute(self, q: SqlQuery, cap: Optional[float] = None) -> tuple[list[str], list[tuple]]:
        cap = cap if cap is not None else self._config.statement_timeout_seconds
        with self._lock:
            self._cancel.clear()
            box: dict = {}

            def work() -> None:
                try:
                    cur = self._conn.execute(q.text)
                    rows = cur.fetchall()
                    cols = [d[0] for d in cur.description] if cur.description else []
                    box["ok"] = (cols, rows)
                except Exception as exc:  # noqa: BLE001 - classified below
                    box["err"] = exc

            worker = threading.Thread(target=work, daemon=True)
            worker.start()
            worker.join(cap)
            if worker.is_alive():
                self._cancel.set()
                self._conn.interrupt()
                worker.join(10.0)
                raise TimeoutCancelled(f"statement exceeded {cap}s cap")
            if "err" in box:
                exc = box["err"]
                msg = str(exc)
                if self._cancel.is_set() or "interrupt" in msg.lower():
                    raise TimeoutCancelled(f"statement exceeded {cap}s cap")
                raise ExecutionFailed(msg)
            return box["ok"]

    # -- explain ------------------------------------------------------------

    def explain(self, q: SqlQuery) -> tuple[PlanTree, CostEstimate]:
        with self._lock:
            try:
                rows = self._conn.execute("EXPLAIN QUERY PLAN " + q.text).fetchall()
            except sqlite3.Error as exc:
                raise SyntaxRejected(str(exc))
        doc = self._synthesize_plan(q.text, rows)
        tree = parse_explain_json(doc)
        cost = CostEstimate(
            total_cost=tree.root.total_cost,
            startup_cost=tree.root.startup_cost,
            source=CostSource.EXPLAIN,
        )
        return tree, cost

    def _row_estimates(self) -> dict[str, float]:
        est: dict[str, float] = {}
        with self._lock:
            try:
                for tbl, _idx, stat in self._conn.execute(
                    "SELECT tbl, idx, stat FROM sqlite_stat1"
                ):
                    first = str(stat).split()[0]
                    try:
                        rows = float(first)
                    except ValueError:
                        continue
                    est[tbl.lower()] = max(est.get(tbl.lower(), 0.0), rows)
            except sqlite3.Error:
                pass
        return est

    def _synthesize_plan(self, sql: str, eqp_rows: list[tuple]) -> dict:
        aliases = _alias_map(sql)
        ctes = _cte_names(sql)
        stats = self._row_estimates()

        nodes: dict[int, _RawNode] = {}
        roots: list[_RawNode] = []
        for nid, parent, _, detail in eqp_rows:
            raw = _RawNode(nid, detail)
            nodes[nid] = raw
            if parent in nodes:
                nodes[parent].children.append(raw)
            else:
                roots.append(raw)

        def table_rows(token: str) -> float:
            table = aliases.get(token.lower(), token.lower())
            return stats.get(table, DEFAULT_ROW_ESTIMATE)

        cte_rows: dict[str, float] = {}

        def _leaf(node_type: str, rows: float) -> dict:
            return {
                "Node Type": node_type,
                "Startup Cost": 0.0,
                "Total Cost": 0.01,
                "Plan Rows": rows,
                "Plan Width": 8,
            }

        def _is_row_source(node: dict) -> bool:
            return node.get("Node Type") in (
                "Seq Scan",
                "Index Scan",
                "Index Only Scan",
                "CTE Scan",
                "Nested Loop",
                "Result",
            ) and "Subplan Name" not in node

        def _attach(top: dict, extras: list[dict]) -> dict:
            if not extras:
                return top
            top = dict(top)
            top["Plans"] = list(top.get("Plans", [])) + extras
            top["Total Cost"] = round(
                top["Total Cost"] + sum(c["Total Cost"] for c in extras), 4
            )
            return top

        def _fold(children: list[dict]) -> Optional[dict]:
            """Fold sibling row sources into a left-deep nested-loop chain,
            wrap in Sort/Aggregate for temp-b-tree markers, and hang
            subplans off the top node."""
            if not children:
                return None
            wrappers = [c for c in children if "__wrapper__" in c]
            rest = [c for c in children if "__wrapper__" not in c]
            sources = [c for c in rest if _is_row_source(c)]
            extras = [c for c in rest if not _is_row_source(c)]

            current: Optional[dict] = None
            if sources:
                current = sources[0]
                for nxt in sources[1:]:
                    out_rows = max(1.0, current["Plan Rows"])
                    in_rows = max(1.0, nxt["Plan Rows"])
                    # A one-row inner side is a lookup join: cardinality
                    # follows the outer side.
                    join_rows = out_rows if in_rows <= 1.0 else max(1.0, out_rows * in_rows * 0.1)
                    total = (
                        current["Total Cost"]
                        + nxt["Total Cost"]
                        + out_rows * 0.002
                        + join_rows * 0.001
                    )
                    current = {
                        "Node Type": "Nested Loop",
                        "Join Type": "Inner",
                        "Startup Cost": 0.0,
                        "Total Cost": round(total, 4),
                        "Plan Rows": join_rows,
                        "Plan Width": 16,
                        "Plans": [current, nxt],
                    }
            elif extras:
                current = extras.pop(0)
            if current is None:
                return None
            current = _attach(current, extras)
            for wrapper in wrappers:
                rows = max(1.0, current["Plan Rows"])
                out_rows = max(1.0, round(math.sqrt(rows))) if wrapper["__wrapper__"] == "group" else rows
                sort_cost = rows * math.log2(rows + 2.0) * 0.002
                total = current["Total Cost"] + sort_cost
                current = {
                    "Node Type": "Aggregate" if wrapper["__wrapper__"] == "group" else "Sort",
                    "Startup Cost": round(total, 4),
                    "Total Cost": round(total + out_rows * 0.001, 4),
                    "Plan Rows": out_rows,
                    "Plan Width": 8,
                    "Plans": [current],
                }
            return current

        def convert(raw: _RawNode) -> dict:
            children = [convert(c) for c in raw.children]
            detail = raw.detail.strip()

            m = _MATERIALIZE_RE.match(detail)
            if m:
                name = m.group(1)
                ctes.add(name.lower())
                node = dict(_fold(children) or _leaf("Result", 1.0))
                node["Subplan Name"] = f"CTE {name}"
                cte_rows[name.lower()] = node.get("Plan Rows", DEFAULT_ROW_ESTIMATE)
                return node

            m = _SUBQUERY_RE.match(detail)
            if m:
                correlated = bool(m.group(1))
                node = dict(_fold(children) or _leaf("Result", 1.0))
                node["Subplan Name"] = f"{'SubPlan' if correlated else 'InitPlan'} {m.group(2)}"
                if correlated:
                    # Re-evaluated per outer row; penalize so repeated
                    # correlated work ranks worse than a shared CTE.
                    node["Total Cost"] = round(node["Total Cost"] * 100.0, 4)
                return node

            m = _COROUTINE_RE.match(detail)
            if m:
                name = m.group(1)
                ctes.add(name.lower())
                node = dict(_fold(children) or _leaf("Result", 1.0))
                node["Subplan Name"] = f"CTE {name}"
                cte_rows[name.lower()] = node.get("Plan Rows", DEFAULT_ROW_ESTIMATE)
                return node

            if "TEMP B-TREE" in detail.upper():
                purpose = "group" if "GROUP BY" in detail.upper() else "order"
                return {"__wrapper__": purpose}

            m = _SEARCH_RE.match(detail) or _SCAN_RE.match(detail)
            if m:
                token = m.group(1)
                covering = bool(m.group(2))
                index = m.group(3)
                is_search = detail.upper().startswith("SEARCH")
                if token.upper() == "CONSTANT":  # "SCAN CONSTANT ROW"
                    node = _leaf("Result", 1.0)
                elif token.lower() in ctes:
                    rows = cte_rows.get(token.lower(), DEFAULT_ROW_ESTIMATE)
                    node = {
                        "Node Type": "CTE Scan",
                        "CTE Name": token,
                        "Alias": token,
                        "Startup Cost": 0.0,
                        "Total Cost": round(rows * 0.01 + 0.1, 4),
                        "Plan Rows": rows,
                        "Plan Width": 8,
                    }
                else:
                    base = table_rows(token)
                    if is_search or index:
                        # Primary-key / unique probes return ~1 row.
                        probe = "PRIMARY KEY" in detail.upper() or "rowid=" in detail
                        rows = 1.0 if probe else max(1.0, base / 20.0)
                        total = round(math.log2(base + 2.0) * 0.2 + rows * 0.005, 4)
                        ntype = "Index Only Scan" if covering else "Index Scan"
                    else:
                        rows = base
                        total = round(base * 0.01 + 1.0, 4)
                        ntype = "Seq Scan"
                    node = {
                        "Node Type": ntype,
                        "Relation Name": aliases.get(token.lower(), token.lower()),
                        "Alias": token,
                        "Startup Cost": 0.0,
                        "Total Cost": total,
                        "Plan Rows": rows,
                        "Plan Width": 8,
                    }
                    if index:
                        node["Index Name"] = index
                if children:
                    wrappers = [c for c in children if "__wrapper__" in c]
                    others = [c for c in children if "__wrapper__" not in c]
                    node = _attach(dict(node), others)
                    if wrappers:
                        node = _fold([node] + wrappers)
                return node

            return _fold(children) or _leaf("Result", 1.0)

        converted = [convert(r) for r in roots]
        top = _fold(converted) or _leaf("Result", 1.0)
        return {"Plan": top}

    # -- catalog ------------------------------------------------------------

    def _existing_tables(self) -> set[str]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT name FROM sqlite_master WHERE type='table'"
            ).fetchall()
        return {r[0].lower() for r in rows}

    def snapshot_stats(self, tables: Sequence[str]) -> StatsSnapshot:
        existing = self._existing_tables()
        snap = StatsSnapshot()
        estimates = self._row_estimates()
        for name in tables:
            key = name.lower()
            if key not in existing:
                raise UnknownTable(name)
            snap.tables[key] = TableStats(row_count=estimates.get(key, 0.0), page_count=0.0)
            with self._lock:
                idx_rows = self._conn.execute(
                    "SELECT name FROM sqlite_master WHERE type='index' AND lower(tbl_name)=?",
                    (key,),
                ).fetchall()
            snap.indexes[key] = [r[0] for r in idx_rows]
        return snap

    def ddl_for(self, tables: Sequence[str]) -> str:
        existing = self._existing_tables()
        parts = []
        for name in tables:
            key = name.lower()
            if key not in existing:
                raise UnknownTable(name)
            with self._lock:
                row = self._conn.execute(
                    "SELECT sql FROM sqlite_master WHERE type='table' AND lower(name)=?",
                    (key,),
                ).fetchone()
            if row and row[0]:
                parts.append(row[0].rstrip(";") + ";")
        return "\n".join(parts)
