"""Desk-scale fixtures: seeded schema and reference query pairs.

The schema (sale/prod/ttime/emp/dept) seeds deterministically at row
counts between 10^3 and 10^5 and works on both backends. Three query pairs
mirror the classic rewrite situations the engine targets:

  1. repeated nested aggregate subqueries -> shared CTE,
  2. intent-based elimination of a join that cannot change the result
     (foreign key guaranteed by the seed),
  3. selectivity-aware join reordering.
"""

from __future__ import annotations

import random
from typing import Sequence

from quite.core import SqlQuery
from quite.db.base import Database

SALE_ROWS = 100_000
PROD_ROWS = 1_000
TTIME_ROWS = 1_000
EMP_ROWS = 1_000
DEPT_ROWS = 20

_CATEGORIES = ("widget", "gadget", "gizmo", "doohickey")

SCHEMA_STATEMENTS = (
    "CREATE TABLE prod (prod_id INTEGER PRIMARY KEY, category TEXT, price REAL)",
    "CREATE TABLE ttime (ttime_id INTEGER PRIMARY KEY, year INTEGER, month INTEGER, day INTEGER)",
    "CREATE TABLE sale (sale_id INTEGER PRIMARY KEY, prod_id INTEGER, ttime_id INTEGER, amount REAL, quantity INTEGER)",
    "CREATE TABLE dept (deptno INTEGER PRIMARY KEY, dname TEXT)",
    "CREATE TABLE emp (empno INTEGER PRIMARY KEY, ename TEXT, deptno INTEGER, sal REAL)",
)


def _values_batches(rows: list[str], batch: int = 1000):
    for i in range(0, len(rows), batch):
        yield ",\n".join(rows[i : i + batch])


def seed_statements(
    sale_rows: int = SALE_ROWS,
    prod_rows: int = PROD_ROWS,
    ttime_rows: int = TTIME_ROWS,
    emp_rows: int = EMP_ROWS,
    dept_rows: int = DEPT_ROWS,
    seed: int = 7,
) -> list[str]:
    """Deterministic INSERT statements for the desk schema."""
    rng = random.Random(seed)
    statements: list[str] = list(SCHEMA_STATEMENTS)

    prod = [
        f"({i}, '{_CATEGORIES[i % len(_CATEGORIES)]}', {round(rng.uniform(1, 500), 2)})"
        for i in range(1, prod_rows + 1)
    ]
    for chunk in _values_batches(prod):
        statements.append(f"INSERT INTO prod (prod_id, category, price) VALUES\n{chunk}")

    ttime = [
        f"({i}, {2020 + (i % 6)}, {1 + (i % 12)}, {1 + (i % 28)})"
        for i in range(1, ttime_rows + 1)
    ]
    for chunk in _values_batches(ttime):
        statements.append(f"INSERT INTO ttime (ttime_id, year, month, day) VALUES\n{chunk}")

    sale = [
        f"({i}, {rng.randint(1, prod_rows)}, {rng.randint(1, ttime_rows)}, "
        f"{round(rng.uniform(1, 1000), 2)}, {rng.randint(1, 40)})"
        for i in range(1, sale_rows + 1)
    ]
    for chunk in _values_batches(sale):
        statements.append(
            f"INSERT INTO sale (sale_id, prod_id, ttime_id, amount, quantity) VALUES\n{chunk}"
        )

    dept = [f"({i}, 'dept_{i}')" for i in range(1, dept_rows + 1)]
    for chunk in _values_batches(dept):
        statements.append(f"INSERT INTO dept (deptno, dname) VALUES\n{chunk}")

    # Every emp.deptno exists in dept: the join-elimination pair relies on it.
    emp = [
        f"({i}, 'emp_{i}', {1 + (i % dept_rows)}, {round(rng.uniform(30000, 120000), 2)})"
        for i in range(1, emp_rows + 1)
    ]
    for chunk in _values_batches(emp):
        statements.append(f"INSERT INTO emp (empno, ename, deptno, sal) VALUES\n{chunk}")

    return statements


def seed_desk_schema(db: Database, **kwargs) -> None:
    """Create and populate the desk schema through a Database handle."""
    for stmt in seed_statements(**kwargs):
        db.execute(SqlQuery(stmt))
    analyze = getattr(db, "analyze", None)
    if callable(analyze):
        analyze()
    else:
        for table in ("prod", "ttime", "sale", "dept", "emp"):
            db.execute(SqlQuery(f"ANALYZE {table}"))


# -- Pair 1: repeated nested aggregate subqueries vs one shared CTE ----------
# Five quantity buckets, three aggregates each: the original re-scans sale
# fifteen times, the rewrite computes every figure in a single pass.

_BUCKETS = ((1, 8), (9, 16), (17, 24), (25, 32), (33, 40))


def _example1_original() -> SqlQuery:
    cols = []
    for i, (lo, hi) in enumerate(_BUCKETS, 1):
        pred = f"quantity BETWEEN {lo} AND {hi}"
        cols.append(f"  (SELECT count(*) FROM sale WHERE {pred}) AS cnt_b{i}")
        cols.append(f"  (SELECT avg(amount) FROM sale WHERE {pred}) AS avg_b{i}")
        cols.append(f"  (SELECT sum(amount) FROM sale WHERE {pred}) AS sum_b{i}")
    return SqlQuery("SELECT\n" + ",\n".join(cols))


def _example1_rewrite() -> SqlQuery:
    inner = []
    outer = []
    for i, (lo, hi) in enumerate(_BUCKETS, 1):
        pred = f"quantity BETWEEN {lo} AND {hi}"
        inner.append(f"    count(CASE WHEN {pred} THEN 1 END) AS cnt_b{i}")
        inner.append(f"    avg(CASE WHEN {pred} THEN amount END) AS avg_b{i}")
        inner.append(f"    sum(CASE WHEN {pred} THEN amount END) AS sum_b{i}")
        outer.extend([f"cnt_b{i}", f"avg_b{i}", f"sum_b{i}"])
    return SqlQuery(
        "WITH bucket_stats AS (\n  SELECT\n"
        + ",\n".join(inner)
        + "\n  FROM sale\n)\nSELECT "
        + ", ".join(outer)
        + " FROM bucket_stats"
    )


EXAMPLE1_ORIGINAL = _example1_original()
EXAMPLE1_REWRITE = _example1_rewrite()

# -- Pair 2: join that cannot affect the aggregate (intent rewrite) ----------

EXAMPLE2_ORIGINAL = SqlQuery(
    """SELECT sum(sub.sal) AS total_sal
FROM (SELECT e.sal AS sal
      FROM emp e
      JOIN dept d ON e.deptno = d.deptno) sub"""
)

EXAMPLE2_REWRITE = SqlQuery("SELECT sum(sal) AS total_sal FROM emp")

# -- Pair 3: selectivity-aware join order -------------------------------------

EXAMPLE3_ORIGINAL = SqlQuery(
    """SELECT count(*) AS n, sum(s.amount) AS total
FROM sale s
JOIN ttime t ON s.ttime_id = t.ttime_id
JOIN prod p ON s.prod_id = p.prod_id
WHERE p.category = 'widget' AND t.year = 2024"""
)

EXAMPLE3_REWRITE = SqlQuery(
    """SELECT count(*) AS n, sum(s.amount) AS total
FROM sale s
JOIN prod p ON s.prod_id = p.prod_id
JOIN ttime t ON s.ttime_id = t.ttime_id
WHERE p.category = 'widget' AND t.year = 2024"""
)

EXAMPLE_PAIRS: Sequence[tuple[str, SqlQuery, SqlQuery]] = (
    ("example1_cte", EXAMPLE1_ORIGINAL, EXAMPLE1_REWRITE),
    ("example2_join_elim", EXAMPLE2_ORIGINAL, EXAMPLE2_REWRITE),
    ("example3_join_order", EXAMPLE3_ORIGINAL, EXAMPLE3_REWRITE),
)
