"""Database access layer: EXPLAIN plans, timed execution, catalog stats and
the execution-based equivalence oracle, behind one `Database` interface.

Backends:
  - PostgresDatabase: the real target (EXPLAIN FORMAT JSON, pg catalogs).
  - EmbeddedDatabase: a SQLite-backed desk engine with the same surface,
    used for offline tests and fixtures.

`connect(dsn)` dispatches on the DSN scheme.
"""

from quite.db.base import (
    ComparisonResult,
    ConnectionFailed,
    Database,
    DbConfig,
    DbError,
    ExecutionFailed,
    StatsSnapshot,
    SyntaxRejected,
    TableStats,
    TimedRun,
    UnknownTable,
    compare_results,
    connect,
    has_top_level_order_by,
    results_equal,
)
from quite.db.plan import PlanNode, PlanTree, parse_explain_json, plan_summary

__all__ = [
    "ComparisonResult",
    "ConnectionFailed",
    "Database",
    "DbConfig",
    "DbError",
    "ExecutionFailed",
    "PlanNode",
    "PlanTree",
    "StatsSnapshot",
    "SyntaxRejected",
    "TableStats",
    "TimedRun",
    "UnknownTable",
    "compare_results",
    "connect",
    "has_top_level_order_by",
    "parse_explain_json",
    "plan_summary",
    "results_equal",
]
