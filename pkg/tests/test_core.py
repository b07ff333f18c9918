import pytest
from hypothesis import given, strategies as st

from quite.core import (
    CostEstimate,
    CostSource,
    QueryState,
    RefinementAction,
    RefinementKind,
    SqlQuery,
    TERMINAL,
    Terminal,
    reward,
    transition,
)

costs = st.floats(min_value=0.0, max_value=1e9, allow_nan=False, allow_infinity=False)


def ce(total: float) -> CostEstimate:
    return CostEstimate(total_cost=total)


class TestSqlQuery:
    def test_rejects_empty_text(self):
        with pytest.raises(ValueError):
            SqlQuery("")
        with pytest.raises(ValueError):
            SqlQuery("   \n")

    def test_normalized_collapses_whitespace_and_semicolon(self):
        assert SqlQuery("SELECT  1 ;").same_as(SqlQuery("SELECT 1"))

    def test_startup_cannot_exceed_total_for_explain(self):
        with pytest.raises(ValueError):
            CostEstimate(total_cost=1.0, startup_cost=2.0, source=CostSource.EXPLAIN)


class TestReward:
    def test_cost_drop_is_positive(self):
        assert reward(ce(100.0), ce(60.0)).value == 40.0

    def test_identity_is_zero(self):
        assert reward(ce(50.0), ce(50.0)).value == 0.0

    def test_regression_is_negative(self):
        assert reward(ce(60.0), ce(75.0)).value == -15.0

    @given(costs, costs)
    def test_antisymmetry(self, a, b):
        assert reward(ce(a), ce(b)).value == -reward(ce(b), ce(a)).value


def refinement(sql: str, i: int) -> RefinementAction:
    return RefinementAction(
        kind=RefinementKind.PREDICATE_PUSHDOWN,
        description=f"step {i}",
        resulting_sql=SqlQuery(sql),
    )


class TestTransition:
    def test_refinement_appends_and_increments(self):
        s0 = QueryState(SqlQuery("SELECT 1"))
        r0 = refinement("SELECT 1 WHERE 1=1", 0)
        s1 = transition(s0, r0)
        assert isinstance(s1, QueryState)
        assert s1.step_index == 1
        assert s1.applied_refinements == (r0,)

    def test_terminal_emits_current_sql(self):
        s = QueryState(
            SqlQuery("SELECT 3"),
            step_index=3,
            applied_refinements=tuple(refinement(f"SELECT {i}", i) for i in range(3)),
        )
        assert transition(s, TERMINAL) == SqlQuery("SELECT 3")

    def test_chain_composition(self):
        s0 = QueryState(SqlQuery("SELECT 0"))
        r0, r1 = refinement("SELECT 1", 0), refinement("SELECT 2", 1)
        s1 = transition(s0, r0)
        s2 = transition(s1, r1)
        final = transition(s2, TERMINAL)
        assert s2.applied_refinements == (r0, r1)
        assert final == SqlQuery("SELECT 2")

    def test_determinism(self):
        s = QueryState(SqlQuery("SELECT 1"))
        r = refinement("SELECT 2", 0)
        assert transition(s, r) == transition(s, r)
        assert Terminal() is TERMINAL

    def test_state_invariant_enforced(self):
        with pytest.raises(ValueError):
            QueryState(SqlQuery("SELECT 1"), step_index=2)

    def test_other_kind_requires_label(self):
        with pytest.raises(ValueError):
            RefinementAction(
                kind=RefinementKind.OTHER, description="?", resulting_sql=SqlQuery("SELECT 1")
            )


@given(st.lists(costs, min_size=2, max_size=20))
def test_reward_telescoping(chain):
    total = sum(reward(ce(chain[i]), ce(chain[i + 1])).value for i in range(len(chain) - 1))
    expected = chain[0] - chain[-1]
    assert total == pytest.approx(expected, rel=1e-9, abs=1e-6)
