"""End-to-end rewrite pipeline: FSM run followed by hint injection.

This is the programmatic surface behind `quite rewrite` and the bench
harness: build the dependency bundle once, then rewrite queries through it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from quite import agents, fsm, hints, kb
from quite.config import QuiteConfig
from quite.core import EquivalenceOutcome, RewriteOutcome, SqlQuery
from quite.corrector import ExternalVerifier, SqlCorrector
from quite.db.base import Database, DbError, referenced_tables
from quite.llm import LlmHandle, Provider, ProviderConfig, Transcript

log = logging.getLogger(__name__)

AGENT_ROLES = ("reasoning", "rewrite", "assistant", "decision", "hints")


def build_llm_handles(
    provider: Provider,
    config: QuiteConfig,
    transcript: Optional[Transcript] = None,
    reasoning_provider: Optional[Provider] = None,
) -> dict[str, LlmHandle]:
    """One handle per agent role. The reasoning role may use a different
    provider/model than the general roles."""
    general_cfg = ProviderConfig(
        endpoint=config.endpoint,
        model_name=config.general_model,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        timeout_seconds=config.llm_timeout_seconds,
        max_retries=config.llm_max_retries,
    )
    reasoning_cfg = ProviderConfig(
        endpoint=config.endpoint,
        model_name=config.reasoning_model,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        timeout_seconds=config.llm_timeout_seconds,
        max_retries=config.llm_max_retries,
    )
    handles = {}
    for role in AGENT_ROLES:
        if role == "reasoning":
            handles[role] = LlmHandle(
                provider=reasoning_provider or provider,
                config=reasoning_cfg,
                agent=role,
                transcript=transcript,
            )
        else:
            handles[role] = LlmHandle(
                provider=provider, config=general_cfg, agent=role, transcript=transcript
            )
    return handles


@dataclass
class RewritePipeline:
    db: Database
    corpus: kb.Corpus
    llms: dict[str, LlmHandle]
    config: QuiteConfig = field(default_factory=QuiteConfig)
    verifier: Optional[ExternalVerifier] = None
    oracle_db: Optional[Database] = None
    transcript: Optional[Transcript] = None

    def __post_init__(self) -> None:
        self.corrector = SqlCorrector(
            db=self.db,
            verifier=self.verifier,
            oracle_db=self.oracle_db,
            k_max=self.config.k_max_repairs,
            budget_seconds=self.config.verify_budget_seconds,
            iteration_cap=self.config.verify_iteration_cap,
        )

    def rewrite(
        self, q0: SqlQuery, inject_hints: Optional[bool] = None
    ) -> tuple[RewriteOutcome, fsm.FsmTrace, hints.HintSet]:
        """Run the FSM, then (unless disabled) the hint stage on the final
        query. Returns the outcome with hints applied to final_sql."""
        deps = fsm.FsmDeps(
            db=self.db,
            corrector=self.corrector,
            corpus=self.corpus,
            llms=self.llms,
            config=self.config,
        )
        outcome, trace = fsm.run(q0, deps)

        do_hints = self.config.inject_hints if inject_hints is None else inject_hints
        hint_set = hints.HintSet(())
        # Fallback outcomes stay byte-identical to the original (their
        # contract); the hint stage only decorates verified rewrites.
        if do_hints and outcome.equivalence_verdict is not EquivalenceOutcome.FALLBACK_ORIGINAL:
            hint_set = self._hint_stage(outcome)
        return outcome, trace, hint_set

    def _hint_stage(self, outcome: RewriteOutcome) -> hints.HintSet:
        final = outcome.final_sql
        try:
            plan, _ = self.db.explain(final)
            stats = self.db.snapshot_stats(referenced_tables(final.text))
        except DbError as exc:
            log.warning("hint stage skipped: %s", exc)
            return hints.HintSet(())
        suggestions = hints.analyze_plan(
            plan,
            stats,
            llm=self.llms.get("hints"),
            small_cte_rows=self.config.no_materialize_rows_threshold,
        )
        if not suggestions:
            return hints.HintSet(())
        selected = hints.select_hints(suggestions, final, self.db, oracle_db=self.oracle_db)
        if not selected:
            return selected
        hinted = hints.apply_hints(final, selected, self.db.supports_pg_hint_plan())
        # The hinted text must still parse; otherwise forget the hints.
        try:
            self.db.explain(hinted)
        except DbError as exc:
            log.warning("hinted query rejected (%s); dropping hints", exc)
            return hints.HintSet(())
        outcome.final_sql = hinted
        return selected

    def rewrite_text(self, q0: SqlQuery, inject_hints: Optional[bool] = None) -> SqlQuery:
        outcome, _, _ = self.rewrite(q0, inject_hints=inject_hints)
        return outcome.final_sql


def report_document(
    outcome: RewriteOutcome,
    trace: fsm.FsmTrace,
    hint_set: hints.HintSet,
    transcript: Optional[Transcript],
) -> dict:
    """Structured report: decision report, trace and transcript references."""
    return {
        "final_sql": outcome.final_sql.text,
        "equivalence_verdict": outcome.equivalence_verdict.value,
        "estimated_cost": outcome.cost.total_cost,
        "cost_source": outcome.cost.source.value,
        "report": outcome.report.to_jsonable(),
        "proposals": [
            {
                "category": p.category.value,
                "description": p.description,
                "sql": p.sql.text,
                "expected_reward": p.expected_reward,
            }
            for p in outcome.proposals
        ],
        "hints": [h.render() for h in hint_set.hints],
        "trace": trace.to_jsonable(),
        "transcript": transcript.to_jsonable() if transcript else [],
    }


def is_fallback(outcome: RewriteOutcome) -> bool:
    return outcome.equivalence_verdict is EquivalenceOutcome.FALLBACK_ORIGINAL
