import time

import pytest

from quite.core import SqlQuery
from quite.db.base import (
    ConnectionFailed,
    DbConfig,
    SyntaxRejected,
    UnknownTable,
    compare_results,
    connect,
    has_top_level_order_by,
    referenced_tables,
    results_equal,
)
from quite.db.embedded import EmbeddedDatabase
from quite import fixtures

Q = SqlQuery


class TestExplain:
    def test_constant_query_has_plan(self, seeded_db):
        tree, cost = seeded_db.explain(Q("SELECT 1"))
        assert cost.total_cost >= 0
        assert tree.root.node_type in ("Result", "Seq Scan")

    def test_malformed_sql_rejected_with_message(self, seeded_db):
        with pytest.raises(SyntaxRejected) as exc:
            seeded_db.explain(Q("SELEC 1"))
        assert "syntax error" in str(exc.value)

    def test_explain_reads_no_user_data(self, fresh_db):
        fresh_db.execute(Q("CREATE TABLE t (a INTEGER)"))
        fresh_db.execute(Q("INSERT INTO t VALUES (1), (2)"))
        before = fresh_db.execute(Q("SELECT count(*) FROM t"))
        fresh_db.explain(Q("DELETE FROM t"))
        after = fresh_db.execute(Q("SELECT count(*) FROM t"))
        assert before == after

    def test_parent_cost_bounds_children(self, seeded_db):
        tree, _ = seeded_db.explain(fixtures.EXAMPLE3_ORIGINAL)
        for node in tree.iter_nodes():
            for child in node.children:
                assert node.total_cost >= child.total_cost

    def test_join_query_produces_join_nodes(self, seeded_db):
        tree, _ = seeded_db.explain(fixtures.EXAMPLE3_ORIGINAL)
        assert tree.joins(), "expected synthesized join nodes"


class TestTimedExecute:
    def test_sleep_fixture_measures_wall_clock(self, fresh_db):
        runs = fresh_db.timed_execute(Q("SELECT pg_sleep(0.1)"), warmups=1, runs=3)
        assert len(runs) == 3
        for r in runs:
            assert not r.timed_out
            assert r.latency_seconds == pytest.approx(0.1, abs=0.08)

    def test_cap_enforced_and_recorded(self, fresh_db):
        start = time.perf_counter()
        runs = fresh_db.timed_execute(Q("SELECT pg_sleep(30)"), warmups=0, runs=1, cap=0.5)
        elapsed = time.perf_counter() - start
        assert elapsed < 5.0
        assert runs == [runs[0]]
        assert runs[0].timed_out
        assert runs[0].latency_seconds == 0.5

    def test_exact_run_count(self, fresh_db):
        runs = fresh_db.timed_execute(Q("SELECT 1"), warmups=0, runs=1)
        assert len(runs) == 1
        runs = fresh_db.timed_execute(Q("SELECT 1"), warmups=2, runs=5)
        assert len(runs) == 5

    def test_timeouts_still_return_exactly_runs(self, fresh_db):
        runs = fresh_db.timed_execute(Q("SELECT pg_sleep(10)"), warmups=0, runs=2, cap=0.2)
        assert len(runs) == 2
        assert all(r.timed_out for r in runs)


class TestResultsEqual:
    def test_identity(self, seeded_db):
        assert results_equal(seeded_db, Q("SELECT 1"), Q("SELECT 1"))

    def test_redundant_predicate_equivalence(self, seeded_db):
        a = Q("SELECT amount FROM sale WHERE amount > 900 AND amount > 900")
        b = Q("SELECT amount FROM sale WHERE amount > 900")
        assert results_equal(seeded_db, a, b)

    def test_differing_constants(self, seeded_db):
        assert not results_equal(seeded_db, Q("SELECT 1"), Q("SELECT 2"))

    def test_multiset_comparison_ignores_order_without_order_by(self, fresh_db):
        fresh_db.execute(Q("CREATE TABLE t (a INTEGER)"))
        fresh_db.execute(Q("INSERT INTO t VALUES (1), (2), (3)"))
        assert results_equal(fresh_db, Q("SELECT a FROM t ORDER BY a DESC"), Q("SELECT a FROM t"))

    def test_order_matters_when_both_have_order_by(self, fresh_db):
        fresh_db.execute(Q("CREATE TABLE u (a INTEGER)"))
        fresh_db.execute(Q("INSERT INTO u VALUES (1), (2)"))
        r = compare_results(
            fresh_db, Q("SELECT a FROM u ORDER BY a ASC"), Q("SELECT a FROM u ORDER BY a DESC")
        )
        assert not r.equal and "row 0" in r.reason

    def test_duplicates_respected(self, fresh_db):
        fresh_db.execute(Q("CREATE TABLE d (a INTEGER)"))
        fresh_db.execute(Q("INSERT INTO d VALUES (1), (1), (2)"))
        assert not results_equal(fresh_db, Q("SELECT a FROM d"), Q("SELECT DISTINCT a FROM d"))

    def test_float_relative_tolerance(self, fresh_db):
        a = Q("SELECT 1.00000000000001")
        b = Q("SELECT 1.0")
        assert results_equal(fresh_db, a, b)
        assert not results_equal(fresh_db, Q("SELECT 1.001"), Q("SELECT 1.0"))

    def test_null_cells(self, fresh_db):
        assert results_equal(fresh_db, Q("SELECT NULL"), Q("SELECT NULL"))
        assert not results_equal(fresh_db, Q("SELECT NULL"), Q("SELECT 1"))

    def test_execution_error_yields_false_with_reason(self, seeded_db):
        r = compare_results(seeded_db, Q("SELECT * FROM missing_table"), Q("SELECT 1"))
        assert not r.equal
        assert "left query failed" in r.reason

    def test_reflexive_and_symmetric(self, seeded_db):
        a = Q("SELECT count(*) FROM prod")
        b = Q("SELECT count(*) + 0 FROM prod")
        assert results_equal(seeded_db, a, a)
        assert results_equal(seeded_db, a, b) == results_equal(seeded_db, b, a)


class TestTopLevelOrderBy:
    @pytest.mark.parametrize(
        "sql,expected",
        [
            ("SELECT a FROM t ORDER BY a", True),
            ("SELECT a FROM t", False),
            ("SELECT a FROM (SELECT a FROM t ORDER BY a) s", False),
            ("SELECT a FROM t WHERE b = 'ORDER BY'", False),
            ("SELECT a FROM t -- ORDER BY a", False),
            ("WITH c AS (SELECT a FROM t ORDER BY a) SELECT * FROM c ORDER BY a", True),
        ],
    )
    def test_detection(self, sql, expected):
        assert has_top_level_order_by(sql) is expected


class TestSnapshotStats:
    def test_row_count_after_analyze(self, fresh_db):
        fresh_db.execute(Q("CREATE TABLE big (a INTEGER)"))
        values = ", ".join(f"({i})" for i in range(1000))
        fresh_db.execute(Q(f"INSERT INTO big VALUES {values}"))
        fresh_db.execute(Q("CREATE INDEX idx_big_a ON big(a)"))
        fresh_db.analyze()
        snap = fresh_db.snapshot_stats(["big"])
        assert snap.tables["big"].row_count == pytest.approx(1000, rel=0.05)
        assert "idx_big_a" in snap.indexes["big"]

    def test_empty_table_bounds(self, fresh_db):
        fresh_db.execute(Q("CREATE TABLE empty_t (a INTEGER)"))
        fresh_db.analyze()
        snap = fresh_db.snapshot_stats(["empty_t"])
        assert snap.tables["empty_t"].row_count >= 0
        assert snap.tables["empty_t"].page_count >= 0

    def test_unknown_table(self, fresh_db):
        with pytest.raises(UnknownTable):
            fresh_db.snapshot_stats(["nope"])


class TestDdlAndConnect:
    def test_ddl_for_returns_create_statements(self, seeded_db):
        ddl = seeded_db.ddl_for(["sale", "prod"])
        assert "CREATE TABLE sale" in ddl
        assert "CREATE TABLE prod" in ddl

    def test_connect_dispatch_sqlite(self, tmp_path):
        db = connect(f"sqlite:///{tmp_path}/x.db")
        assert isinstance(db, EmbeddedDatabase)
        db.execute(Q("CREATE TABLE t (a INTEGER)"))
        db.close()

    def test_connect_memory(self):
        db = connect("sqlite:///:memory:")
        assert db.execute(Q("SELECT 1"))[1] == [(1,)]
        db.close()

    def test_connect_unknown_scheme(self):
        with pytest.raises(ValueError):
            connect("mysql://nope")

    def test_db_config_validation(self):
        with pytest.raises(ValueError):
            DbConfig(statement_timeout_seconds=0)


class TestReferencedTables:
    def test_basic_joins(self):
        assert referenced_tables(fixtures.EXAMPLE3_ORIGINAL.text) == ["sale", "ttime", "prod"]

    def test_cte_names_excluded(self):
        sql = "WITH c AS (SELECT 1 FROM real_table) SELECT * FROM c JOIN other ON 1=1"
        assert referenced_tables(sql) == ["real_table", "other"]
