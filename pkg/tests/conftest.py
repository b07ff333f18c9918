"""Shared fixtures: seeded embedded databases, a stub database with
scripted EXPLAIN costs (for FSM tests that must run with no engine), and
scripted-provider helpers."""

from __future__ import annotations

import pytest

from quite import fixtures, kb
from quite.config import QuiteConfig
from quite.core import CostEstimate, CostSource, SqlQuery
from quite.db.base import Database, StatsSnapshot, SyntaxRejected, TableStats
from quite.db.embedded import EmbeddedDatabase
from quite.db.plan import PlanTree, parse_explain_json
from quite.llm import LlmHandle, ProviderConfig, ScriptedProvider, Transcript

SEED_SALE_ROWS = 20_000


@pytest.fixture(scope="session")
def seeded_db() -> EmbeddedDatabase:
    """Desk schema at reduced scale, shared read-only across tests."""
    db = EmbeddedDatabase(":memory:")
    for stmt in fixtures.seed_statements(sale_rows=SEED_SALE_ROWS):
        db.execute(SqlQuery(stmt))
    db.analyze()
    return db


@pytest.fixture()
def fresh_db() -> EmbeddedDatabase:
    return EmbeddedDatabase(":memory:")


@pytest.fixture(scope="session")
def corpus() -> kb.Corpus:
    from importlib import resources

    with resources.as_file(resources.files("quite.data").joinpath("corpus.jsonl")) as p:
        return kb.Corpus.load(p)


def _plan_doc(total_cost: float, rows: float = 100.0) -> dict:
    return {
        "Plan": {
            "Node Type": "Seq Scan",
            "Relation Name": "stub",
            "Startup Cost": 0.0,
            "Total Cost": total_cost,
            "Plan Rows": rows,
            "Plan Width": 8,
        }
    }


class StubDatabase(Database):
    """No-engine Database: EXPLAIN costs come from a script keyed by
    normalized SQL text; executions return canned rows."""

    def __init__(
        self,
        costs: dict[str, float] | None = None,
        default_cost: float = 100.0,
        syntax_errors: set[str] | None = None,
        results: dict[str, list[tuple]] | None = None,
    ):
        self.costs = {SqlQuery(k).normalized(): v for k, v in (costs or {}).items()}
        self.default_cost = default_cost
        self.syntax_errors = {SqlQuery(s).normalized() for s in (syntax_errors or set())}
        self.results = {SqlQuery(k).normalized(): v for k, v in (results or {}).items()}
        self.explained: list[str] = []

    def explain(self, q: SqlQuery) -> tuple[PlanTree, CostEstimate]:
        key = q.normalized()
        self.explained.append(key)
        if key in self.syntax_errors:
            raise SyntaxRejected(f'syntax error at or near "{q.text[:20]}"')
        cost = self.costs.get(key, self.default_cost)
        tree = parse_explain_json(_plan_doc(cost))
        return tree, CostEstimate(total_cost=cost, startup_cost=0.0, source=CostSource.EXPLAIN)

    def execute(self, q: SqlQuery, cap=None):
        key = q.normalized()
        if key in self.syntax_errors:
            raise SyntaxRejected("syntax error")
        return ["c"], self.results.get(key, [(1,)])

    def snapshot_stats(self, tables):
        return StatsSnapshot(tables={t: TableStats(row_count=1000.0) for t in tables})

    def ddl_for(self, tables):
        return "\n".join(f"CREATE TABLE {t} (c integer);" for t in tables)

    def clear_caches(self) -> None:
        pass

    def close(self) -> None:
        pass


@pytest.fixture()
def stub_db() -> StubDatabase:
    return StubDatabase()


def make_handle(
    entries,
    agent: str = "agent",
    transcript: Transcript | None = None,
) -> LlmHandle:
    return LlmHandle(
        provider=ScriptedProvider(entries),
        config=ProviderConfig(),
        agent=agent,
        transcript=transcript,
    )


def handles_from_script(entries, transcript: Transcript | None = None) -> dict[str, LlmHandle]:
    """All agent roles share one scripted provider (matchers route)."""
    provider = ScriptedProvider(entries)
    cfg = ProviderConfig()
    return {
        role: LlmHandle(provider=provider, config=cfg, agent=role, transcript=transcript)
        for role in ("reasoning", "rewrite", "assistant", "decision", "hints")
    }


@pytest.fixture()
def default_config() -> QuiteConfig:
    return QuiteConfig()
