"""quite: feedback-aware SQL query rewriting with LLM agents and
fine-grained optimizer hint injection."""

__version__ = "0.1.0"

from quite.core import (  # noqa: F401
    CostEstimate,
    CostSource,
    EquivalenceOutcome,
    QueryState,
    RefinementAction,
    RefinementKind,
    Reward,
    RewriteOutcome,
    RewriteSession,
    SqlQuery,
    reward,
    transition,
)
