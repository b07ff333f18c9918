"""Shared domain types for the rewrite pipeline.

A rewrite run walks a query through a sequence of states: each state is one
SQL form, each step applies a refinement, and the payoff of a step is the
drop in optimizer-estimated cost. These types are pure values; everything
stateful lives in the session object owned by the FSM runner.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Union

if TYPE_CHECKING:  # pragma: no cover
    from quite.agents import DecisionReport
    from quite.membuf import MemoryBuffer


class Dialect(str, enum.Enum):
    POSTGRES = "postgres"


@dataclass(frozen=True)
class SqlQuery:
    """A SQL statement plus its target dialect.

    Syntactic validity is not checked here; that is the corrector's job
    (it needs a database or a local grammar to decide).
    """

    text: str
    dialect: Dialect = Dialect.POSTGRES

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("SqlQuery.text must be non-empty")

    def normalized(self) -> str:
        """Whitespace-collapsed text, used for 'same query?' comparisons."""
        return " ".join(self.text.split()).rstrip(";").strip()

    def same_as(self, other: "SqlQuery") -> bool:
        return self.normalized() == other.normalized()


class RefinementKind(str, enum.Enum):
    JOIN_REORDER = "join_reorder"
    PREDICATE_PUSHDOWN = "predicate_pushdown"
    CTE_CONVERSION = "cte_conversion"
    SUBQUERY_FLATTEN = "subquery_flatten"
    CONSTANT_FOLD = "constant_fold"
    PREDICATE_SIMPLIFY = "predicate_simplify"
    REDUNDANT_ELIM = "redundant_elim"
    OTHER = "other"


@dataclass(frozen=True)
class RefinementAction:
    """One rewrite step: what was done and the SQL it produced."""

    kind: RefinementKind
    description: str
    resulting_sql: SqlQuery
    label: Optional[str] = None  # required when kind == OTHER

    def __post_init__(self) -> None:
        if self.kind is RefinementKind.OTHER and not self.label:
            raise ValueError("RefinementKind.OTHER requires an explanatory label")


class Terminal:
    """Sentinel action: stop refining and emit the current query."""

    _instance: Optional["Terminal"] = None

    def __new__(cls) -> "Terminal":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:  # pragma: no cover
        return "Terminal()"


TERMINAL = Terminal()


class CostSource(str, enum.Enum):
    EXPLAIN = "explain"
    LLM_JUDGMENT = "llm_judgment"
    BLENDED = "blended"


@dataclass(frozen=True)
class CostEstimate:
    """Optimizer cost in planner units. EXPLAIN-sourced costs are
    authoritative; LLM judgments are advisory and never override them."""

    total_cost: float
    startup_cost: float = 0.0
    source: CostSource = CostSource.EXPLAIN

    def __post_init__(self) -> None:
        if self.total_cost < 0 or self.startup_cost < 0:
            raise ValueError("costs must be non-negative")
        if self.source is CostSource.EXPLAIN and self.startup_cost > self.total_cost:
            raise ValueError("startup_cost cannot exceed total_cost for explain costs")


@dataclass(frozen=True)
class Reward:
    """Cost drop between two consecutive states; positive means cheaper."""

    value: float


def reward(before: CostEstimate, after: CostEstimate) -> Reward:
    """Cost(before) - Cost(after)."""
    return Reward(before.total_cost - after.total_cost)


@dataclass(frozen=True)
class QueryState:
    """One point in the rewrite walk: current SQL plus how it got here."""

    sql: SqlQuery
    step_index: int = 0
    applied_refinements: tuple[RefinementAction, ...] = ()

    def __post_init__(self) -> None:
        if self.step_index != len(self.applied_refinements):
            raise ValueError("step_index must equal len(applied_refinements)")


def transition(
    state: QueryState, action: Union[RefinementAction, Terminal]
) -> Union[QueryState, SqlQuery]:
    """Deterministic transition: a refinement advances the state, the
    terminal action emits the current query unchanged."""
    if isinstance(action, Terminal):
        return state.sql
    return QueryState(
        sql=action.resulting_sql,
        step_index=state.step_index + 1,
        applied_refinements=state.applied_refinements + (action,),
    )


class EquivalenceOutcome(str, enum.Enum):
    """How the final query earned the right to be emitted."""

    VERIFIED_TOOL = "verified_tool"
    VERIFIED_LLM = "verified_llm"
    FALLBACK_ORIGINAL = "fallback_original"


@dataclass
class RewriteOutcome:
    final_sql: SqlQuery
    cost: CostEstimate
    report: "DecisionReport"
    proposals: list  # list[RewriteProposal]; typed loosely to avoid an import cycle
    equivalence_verdict: EquivalenceOutcome


@dataclass
class RewriteSession:
    """Mutable state of one FSM run.

    `iteration` counts Reasoning entries (1-based once the first entry runs)
    and never exceeds `max_iterations`. `advanced_knowledge` accumulates the
    ids of knowledge entries retrieved after Decision rejections.
    """

    original: SqlQuery
    current: QueryState
    buffer: "MemoryBuffer"
    iteration: int = 0
    max_iterations: int = 2
    advanced_knowledge: set[str] = field(default_factory=set)
    outcome: Optional[RewriteOutcome] = None

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    def enter_reasoning(self) -> None:
        self.iteration += 1
        if self.iteration > self.max_iterations:
            raise RuntimeError(
                f"iteration {self.iteration} exceeds budget {self.max_iterations}"
            )

    def advance(self, action: RefinementAction) -> None:
        nxt = transition(self.current, action)
        assert isinstance(nxt, QueryState)
        self.current = nxt
