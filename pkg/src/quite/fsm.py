"""Finite state machine driving one rewrite run.

Stages: Reasoning (chain generation + candidate selection/enhancement) ->
Verification (hybrid corrector) -> Decision (four-dimension report, binary
termination judgment) -> Termination. A Decision rejection retrieves
knowledge-base guidance into the shared buffer and re-enters Reasoning; a
failed syntax repair aborts the iteration back to Reasoning. The budget
bounds the total number of Reasoning entries; on exhaustion the best
verified candidate by EXPLAIN cost (or the original query) is emitted.

Every legal transition is recorded in the trace. Failure terminations
(connection loss, empty reasoning chains) carry the `aborted` cause, which
doubles as the failed-trace marker and is exempt from the legality table.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

from quite import agents, kb, membuf
from quite.config import QuiteConfig
from quite.core import (
    CostEstimate,
    CostSource,
    EquivalenceOutcome,
    QueryState,
    RewriteOutcome,
    RewriteSession,
    SqlQuery,
)
from quite.corrector import SqlCorrector, VerdictStage, VerdictStatus
from quite.db.base import ConnectionFailed, Database, referenced_tables
from quite.db.plan import PlanTree, plan_summary
from quite.llm import LlmHandle

log = logging.getLogger(__name__)


class FsmState(str, enum.Enum):
    REASONING = "reasoning"
    VERIFICATION = "verification"
    DECISION = "decision"
    TERMINATION = "termination"


class Cause(str, enum.Enum):
    PROPOSED = "proposed"
    EARLY_STOP = "early_stop"
    VERIFIED = "verified"
    REPAIR_ABORT = "repair_abort"
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ABORTED = "aborted"


LEGAL_TRANSITIONS: dict[FsmState, frozenset[FsmState]] = {
    FsmState.REASONING: frozenset({FsmState.VERIFICATION, FsmState.TERMINATION}),
    FsmState.VERIFICATION: frozenset({FsmState.DECISION, FsmState.REASONING}),
    FsmState.DECISION: frozenset({FsmState.TERMINATION, FsmState.REASONING}),
    FsmState.TERMINATION: frozenset(),
}

CAUSE_FOR_TRANSITION: dict[tuple[FsmState, FsmState], frozenset[Cause]] = {
    (FsmState.REASONING, FsmState.VERIFICATION): frozenset({Cause.PROPOSED}),
    (FsmState.REASONING, FsmState.TERMINATION): frozenset(
        {Cause.EARLY_STOP, Cause.BUDGET_EXHAUSTED}
    ),
    (FsmState.VERIFICATION, FsmState.DECISION): frozenset({Cause.VERIFIED}),
    (FsmState.VERIFICATION, FsmState.REASONING): frozenset({Cause.REPAIR_ABORT}),
    (FsmState.DECISION, FsmState.TERMINATION): frozenset({Cause.ACCEPTED}),
    (FsmState.DECISION, FsmState.REASONING): frozenset({Cause.REJECTED}),
}


@dataclass(frozen=True)
class TraceEntry:
    from_state: FsmState
    to_state: FsmState
    iteration: int
    cause: Cause


@dataclass
class FsmTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def record(self, from_state: FsmState, to_state: FsmState, iteration: int, cause: Cause) -> None:
        self.entries.append(TraceEntry(from_state, to_state, iteration, cause))

    def validate(self) -> None:
        """Assert trace well-formedness: starts at Reasoning, ends at
        Termination, and every non-aborted entry is a legal transition with
        a cause belonging to that edge."""
        if not self.entries:
            raise ValueError("empty trace")
        if self.entries[0].from_state is not FsmState.REASONING:
            raise ValueError("trace must start at Reasoning")
        if self.entries[-1].to_state is not FsmState.TERMINATION:
            raise ValueError("trace must end at Termination")
        for entry in self.entries:
            if entry.cause is Cause.ABORTED:
                if entry.to_state is not FsmState.TERMINATION:
                    raise ValueError("aborted entries must terminate the run")
                continue
            if entry.to_state not in LEGAL_TRANSITIONS[entry.from_state]:
                raise ValueError(f"illegal transition {entry.from_state} -> {entry.to_state}")
            allowed = CAUSE_FOR_TRANSITION[(entry.from_state, entry.to_state)]
            if entry.cause not in allowed:
                raise ValueError(
                    f"cause {entry.cause} invalid for {entry.from_state} -> {entry.to_state}"
                )

    def reasoning_entries(self) -> int:
        """Reasoning entries = transitions leaving Reasoning with a fresh
        proposal (PROPOSED/EARLY_STOP) plus aborted reasoning attempts."""
        return sum(
            1
            for e in self.entries
            if e.from_state is FsmState.REASONING
            and e.cause in (Cause.PROPOSED, Cause.EARLY_STOP, Cause.ABORTED)
        )

    def to_jsonable(self) -> list[dict]:
        return [
            {
                "from": e.from_state.value,
                "to": e.to_state.value,
                "iteration": e.iteration,
                "cause": e.cause.value,
            }
            for e in self.entries
        ]


@dataclass
class FsmDeps:
    db: Database
    corrector: SqlCorrector
    corpus: kb.Corpus
    llms: dict[str, LlmHandle]  # roles: reasoning, rewrite, assistant, decision
    config: QuiteConfig = field(default_factory=QuiteConfig)


def _verdict_outcome(status: VerdictStatus, stage: VerdictStage) -> EquivalenceOutcome:
    if status is VerdictStatus.EQUIVALENT and stage is VerdictStage.TOOL:
        return EquivalenceOutcome.VERIFIED_TOOL
    if status is VerdictStatus.EQUIVALENT and stage is VerdictStage.LLM:
        return EquivalenceOutcome.VERIFIED_LLM
    return EquivalenceOutcome.FALLBACK_ORIGINAL


def run(q0: SqlQuery, deps: FsmDeps) -> tuple[RewriteOutcome, FsmTrace]:
    """Execute one full rewrite run and return the sealed outcome plus the
    transition trace."""
    cfg = deps.config
    trace = FsmTrace()
    buffer = membuf.MemoryBuffer(per_slice_cap=cfg.slice_cap_chars)
    session = RewriteSession(
        original=q0,
        current=QueryState(q0),
        buffer=buffer,
        max_iterations=cfg.max_iterations,
    )

    all_proposals: list[agents.RewriteProposal] = []
    # (query, verdict-status/stage, cost) for every candidate that passed
    # verification as an actual rewrite; budget exhaustion picks the cheapest.
    verified_pool: list[tuple[SqlQuery, EquivalenceOutcome, CostEstimate]] = []

    def fallback_outcome(narrative: str, cost: Optional[CostEstimate]) -> RewriteOutcome:
        cost = cost or CostEstimate(0.0, 0.0, CostSource.LLM_JUDGMENT)
        report = agents.build_report(cost, cost, narrative, verdict=False)
        return RewriteOutcome(
            final_sql=q0,
            cost=cost,
            report=report,
            proposals=all_proposals,
            equivalence_verdict=EquivalenceOutcome.FALLBACK_ORIGINAL,
        )

    try:
        stats = deps.db.snapshot_stats(referenced_tables(q0.text))
        plan0, cost0 = deps.db.explain(q0)
    except ConnectionFailed as exc:
        log.error("database unreachable before the first stage: %s", exc)
        trace.record(FsmState.REASONING, FsmState.TERMINATION, 0, Cause.ABORTED)
        session.outcome = fallback_outcome(f"aborted: {exc}", None)
        return session.outcome, trace

    session.buffer = membuf.put(
        session.buffer, membuf.SliceKind.QUERY_INFO, f"Original query:\n{q0.text}", 0
    )
    session.buffer = membuf.put(
        session.buffer,
        membuf.SliceKind.PLAN_SUMMARY,
        f"estimated cost {cost0.total_cost:.2f}\n{plan_summary(plan0)}",
        0,
    )

    state = FsmState.REASONING
    q_e: Optional[SqlQuery] = None
    safe_q: Optional[SqlQuery] = None
    safe_outcome = EquivalenceOutcome.FALLBACK_ORIGINAL
    after_plan: Optional[PlanTree] = None
    after_cost: Optional[CostEstimate] = None
    outcome: Optional[RewriteOutcome] = None

    def seal_accept(report: agents.DecisionReport) -> RewriteOutcome:
        assert safe_q is not None and after_cost is not None
        final = safe_q if safe_outcome is not EquivalenceOutcome.FALLBACK_ORIGINAL else q0
        return RewriteOutcome(
            final_sql=final,
            cost=after_cost,
            report=report,
            proposals=all_proposals,
            equivalence_verdict=safe_outcome,
        )

    def seal_exhausted() -> RewriteOutcome:
        if verified_pool:
            best_q, best_v, best_cost = min(verified_pool, key=lambda t: t[2].total_cost)
            report = agents.build_report(
                cost0,
                best_cost,
                "iteration budget exhausted; emitting best verified candidate",
                verdict=False,
                plan_before=plan0,
                plan_after=after_plan,
            )
            return RewriteOutcome(
                final_sql=best_q,
                cost=best_cost,
                report=report,
                proposals=all_proposals,
                equivalence_verdict=best_v,
            )
        report = agents.build_report(
            cost0, cost0, "iteration budget exhausted; no verified candidate", verdict=False
        )
        return RewriteOutcome(
            final_sql=q0,
            cost=cost0,
            report=report,
            proposals=all_proposals,
            equivalence_verdict=EquivalenceOutcome.FALLBACK_ORIGINAL,
        )

    try:
        while state is not FsmState.TERMINATION:
            if state is FsmState.REASONING:
                if session.iteration >= cfg.max_iterations:
                    trace.record(
                        FsmState.REASONING,
                        FsmState.TERMINATION,
                        session.iteration,
                        Cause.BUDGET_EXHAUSTED,
                    )
                    outcome = seal_exhausted()
                    state = FsmState.TERMINATION
                    continue
                session.enter_reasoning()
                it = session.iteration
                try:
                    chain = agents.reasoning_generate(
                        q0, stats, plan0, session.buffer, deps.llms["reasoning"]
                    )
                except agents.EmptyChain as exc:
                    trace.record(FsmState.REASONING, FsmState.TERMINATION, it, Cause.ABORTED)
                    outcome = fallback_outcome(f"aborted: {exc}", cost0)
                    state = FsmState.TERMINATION
                    continue
                q_e, proposals, early_stop = agents.rewrite_select_and_enhance(
                    chain, deps.llms["rewrite"], deps.db, q0
                )
                all_proposals.extend(proposals)
                if proposals:
                    session.buffer = membuf.put(
                        session.buffer,
                        membuf.SliceKind.REWRITE_PROPOSALS,
                        "\n\n".join(p.render() for p in proposals),
                        it,
                    )
                if early_stop and q_e.same_as(q0):
                    trace.record(FsmState.REASONING, FsmState.TERMINATION, it, Cause.EARLY_STOP)
                    report = agents.build_report(
                        cost0,
                        cost0,
                        "early stop: candidate already well-optimized",
                        verdict=True,
                        plan_before=plan0,
                        plan_after=plan0,
                    )
                    outcome = RewriteOutcome(
                        final_sql=q0,
                        cost=cost0,
                        report=report,
                        proposals=all_proposals,
                        equivalence_verdict=EquivalenceOutcome.FALLBACK_ORIGINAL,
                    )
                    state = FsmState.TERMINATION
                    continue
                # An early-stopped candidate that differs from the original
                # still goes through Verification: nothing unverified leaves.
                trace.record(FsmState.REASONING, FsmState.VERIFICATION, it, Cause.PROPOSED)
                state = FsmState.VERIFICATION

            elif state is FsmState.VERIFICATION:
                assert q_e is not None
                try:
                    safe_q, verdict = agents.assistant_verify(
                        q0, q_e, deps.corrector, deps.llms["assistant"]
                    )
                except agents.AbortIteration as exc:
                    log.info("verification aborted: %s", exc)
                    trace.record(
                        FsmState.VERIFICATION, FsmState.REASONING, session.iteration, Cause.REPAIR_ABORT
                    )
                    state = FsmState.REASONING
                    continue
                safe_outcome = _verdict_outcome(verdict.status, verdict.stage)
                if safe_outcome is EquivalenceOutcome.FALLBACK_ORIGINAL:
                    safe_q = q0
                after_plan, after_cost = deps.db.explain(safe_q)
                if safe_outcome is not EquivalenceOutcome.FALLBACK_ORIGINAL and not safe_q.same_as(q0):
                    verified_pool.append((safe_q, safe_outcome, after_cost))
                trace.record(
                    FsmState.VERIFICATION, FsmState.DECISION, session.iteration, Cause.VERIFIED
                )
                state = FsmState.DECISION

            elif state is FsmState.DECISION:
                assert safe_q is not None and after_cost is not None and after_plan is not None
                accepted, report, retrieved, session.buffer = agents.decision_judge(
                    q0,
                    safe_q,
                    cost0,
                    after_cost,
                    plan0,
                    after_plan,
                    deps.llms["decision"],
                    deps.corpus,
                    session.buffer,
                    session.iteration,
                    k=cfg.retrieval_k,
                )
                if accepted:
                    trace.record(
                        FsmState.DECISION, FsmState.TERMINATION, session.iteration, Cause.ACCEPTED
                    )
                    outcome = seal_accept(report)
                    state = FsmState.TERMINATION
                else:
                    session.advanced_knowledge.update(e.id for e in retrieved)
                    trace.record(
                        FsmState.DECISION, FsmState.REASONING, session.iteration, Cause.REJECTED
                    )
                    state = FsmState.REASONING
    except ConnectionFailed as exc:
        log.error("database connection lost mid-run: %s", exc)
        trace.record(state, FsmState.TERMINATION, session.iteration, Cause.ABORTED)
        outcome = fallback_outcome(f"aborted: {exc}", cost0)

    assert outcome is not None
    if outcome.equivalence_verdict is EquivalenceOutcome.FALLBACK_ORIGINAL:
        assert outcome.final_sql.text == q0.text
    session.outcome = outcome
    return outcome, trace
