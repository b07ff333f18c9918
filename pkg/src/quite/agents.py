"""The four specialized agents: reasoning, rewrite, assistant, decision.

Each agent is a stateless function over (inputs, provider handle). The
reasoning agent produces a chain of refinement proposals with SQL
candidates; the rewrite agent prices every candidate with real EXPLAIN
costs (LLM self-scores only break ties), picks the cheapest and runs one
enhancement pass; the assistant agent drives the hybrid corrector; the
decision agent writes the four-dimension report and decides termination,
pulling knowledge-base guidance into the shared buffer on rejection.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional

from quite import kb, membuf
from quite.core import CostEstimate, SqlQuery
from quite.corrector import EquivalenceVerdict, RepairFailed, SqlCorrector
from quite.db.base import Database, StatsSnapshot, SyntaxRejected
from quite.db.plan import PlanTree, plan_summary
from quite.llm import ChatMessage, LlmHandle, extract_sql, split_reasoning

log = logging.getLogger(__name__)

_SELF_SCORE_RE = re.compile(
    r"\b(?:score|expected\s+cost\s+reduction)\s*[:=]\s*([0-9]*\.?[0-9]+)", re.IGNORECASE
)
_FENCE_RE = re.compile(r"```(?:sql)?\s*\n(.*?)```", re.DOTALL | re.IGNORECASE)


def load_prompt(name: str) -> str:
    return resources.files("quite.prompts").joinpath(f"{name}.txt").read_text(
        encoding="utf-8"
    )


class EmptyChain(Exception):
    """The reasoning model produced no SQL-bearing node, twice."""


class AbortIteration(Exception):
    """Verification cannot proceed; the FSM returns to the reasoning stage."""


@dataclass
class ChainNode:
    proposal_text: str
    sql_candidate: Optional[SqlQuery] = None
    self_score: Optional[float] = None


@dataclass
class ReasoningChain:
    nodes: list[ChainNode]
    raw_trace: str

    def candidates(self) -> list[ChainNode]:
        return [n for n in self.nodes if n.sql_candidate is not None]


@dataclass
class RewriteProposal:
    category: kb.Category
    description: str
    sql: SqlQuery
    expected_reward: float  # advisory: base EXPLAIN cost minus candidate cost

    def render(self) -> str:
        return (
            f"[{self.category.value}] expected reward {self.expected_reward:.2f}\n"
            f"{self.description}\n{self.sql.text}"
        )


@dataclass
class CostDelta:
    before: CostEstimate
    after: CostEstimate

    @property
    def delta(self) -> float:
        return self.before.total_cost - self.after.total_cost

    def render(self) -> str:
        return (
            f"estimated cost {self.before.total_cost:.2f} -> "
            f"{self.after.total_cost:.2f} (delta {self.delta:+.2f})"
        )


@dataclass
class DecisionReport:
    """Four-dimension assessment of a rewrite; every dimension is always
    populated, possibly with "none observed"."""

    cost_changes: CostDelta
    plan_characteristics: str
    resource_utilization: str
    other_improvements: str
    verdict: bool

    def render(self) -> str:
        return (
            f"cost changes: {self.cost_changes.render()}\n"
            f"plan characteristics: {self.plan_characteristics}\n"
            f"resource utilization: {self.resource_utilization}\n"
            f"other improvements: {self.other_improvements}\n"
            f"verdict: {'terminate' if self.verdict else 'continue'}"
        )

    def to_jsonable(self) -> dict:
        return {
            "cost_changes": {
                "before": self.cost_changes.before.total_cost,
                "after": self.cost_changes.after.total_cost,
                "delta": self.cost_changes.delta,
            },
            "plan_characteristics": self.plan_characteristics,
            "resource_utilization": self.resource_utilization,
            "other_improvements": self.other_improvements,
            "verdict": self.verdict,
        }


# -- chain parsing -------------------------------------------------------------


def parse_chain(raw: str) -> list[ChainNode]:
    """Split a reasoning trace into nodes around fenced SQL blocks.

    The prose before each block is that node's proposal text; an optional
    "score: x" line becomes the self-score. Responses without fences fall
    back to the leading-keyword statement scan.
    """
    thinking, answer = split_reasoning(raw)
    text = f"{thinking}\n{answer}" if thinking else answer
    nodes: list[ChainNode] = []
    last_end = 0
    for m in _FENCE_RE.finditer(text):
        prose = text[last_end : m.start()].strip()
        statements = extract_sql(m.group(0))
        candidate = None
        if statements:
            try:
                candidate = SqlQuery(statements[0])
            except ValueError:
                candidate = None
        score = _parse_score(prose) or _parse_score(text[m.end() : m.end() + 200])
        nodes.append(
            ChainNode(proposal_text=prose or "(no rationale)", sql_candidate=candidate, self_score=score)
        )
        last_end = m.end()
    if nodes:
        return nodes
    statements = extract_sql(text)
    for stmt in statements:
        try:
            candidate = SqlQuery(stmt)
        except ValueError:
            continue
        nodes.append(
            ChainNode(
                proposal_text=text[:400].strip() or "(no rationale)",
                sql_candidate=candidate,
                self_score=_parse_score(text),
            )
        )
    if not nodes and text.strip():
        nodes.append(ChainNode(proposal_text=text.strip()))
    return nodes


def _parse_score(text: str) -> Optional[float]:
    m = _SELF_SCORE_RE.search(text)
    return float(m.group(1)) if m else None


# -- reasoning agent -------------------------------------------------------------


def reasoning_generate(
    q0: SqlQuery,
    stats: StatsSnapshot,
    plan: PlanTree,
    buffer: membuf.MemoryBuffer,
    llm: LlmHandle,
) -> ReasoningChain:
    """Prompt the reasoning model with the original query, its plan, the
    catalog stats and the rendered memory buffer; parse the trace into a
    chain. A chain without any SQL candidate is regenerated once, then
    rejected with EmptyChain."""
    memory = membuf.render(buffer, "reasoning")
    prompt = load_prompt("reasoning").format(
        query=q0.text,
        plan=plan_summary(plan),
        stats=stats.render() or "none available",
        memory=f"Context from previous rounds:\n{memory}" if memory else "",
    )
    messages = [
        ChatMessage("system", "You are an expert SQL performance engineer."),
        ChatMessage("user", prompt),
    ]
    for attempt in range(2):
        raw = llm.ask(messages)
        nodes = parse_chain(raw)
        chain = ReasoningChain(nodes=nodes, raw_trace=raw)
        if chain.candidates():
            return chain
        log.info("reasoning chain had no SQL candidate (attempt %d)", attempt + 1)
    raise EmptyChain("no SQL-bearing node after one retry")


# -- rewrite agent ----------------------------------------------------------------


def rewrite_select_and_enhance(
    chain: ReasoningChain,
    llm: LlmHandle,
    db: Database,
    base_query: SqlQuery,
) -> tuple[SqlQuery, list[RewriteProposal], bool]:
    """Price each candidate with EXPLAIN, pick the cheapest (self-score
    breaks ties), then run the enhancement prompt. early_stop=True when the
    enhancement declares the candidate well-optimized by returning it
    unchanged (or when no candidate survives EXPLAIN)."""
    try:
        _, base_cost = db.explain(base_query)
        base_total = base_cost.total_cost
    except SyntaxRejected:
        base_total = 0.0

    priced: list[tuple[float, float, int, ChainNode]] = []
    proposals: list[RewriteProposal] = []
    for i, node in enumerate(chain.candidates()):
        assert node.sql_candidate is not None
        try:
            _, cost = db.explain(node.sql_candidate)
        except SyntaxRejected as exc:
            log.info("candidate %d failed EXPLAIN: %s", i, exc)
            continue
        category = kb.heuristic_classify(f"{node.proposal_text}\n{node.sql_candidate.text}")
        proposals.append(
            RewriteProposal(
                category=category,
                description=node.proposal_text[:500],
                sql=node.sql_candidate,
                expected_reward=base_total - cost.total_cost,
            )
        )
        tie_break = -(node.self_score or 0.0)
        priced.append((cost.total_cost, tie_break, i, node))

    if not priced:
        return base_query, proposals, True

    priced.sort(key=lambda item: (item[0], item[1], item[2]))
    best = priced[0][3]
    assert best.sql_candidate is not None
    candidate = best.sql_candidate

    reply = llm.ask_text(
        "You refine SQL rewrites.",
        load_prompt("enhance").format(candidate=candidate.text),
    )
    statements = extract_sql(reply)
    enhanced = candidate
    if statements:
        try:
            enhanced = SqlQuery(statements[0], dialect=candidate.dialect)
        except ValueError:
            enhanced = candidate
    early_stop = enhanced.same_as(candidate)
    return (candidate if early_stop else enhanced), proposals, early_stop


# -- assistant agent ----------------------------------------------------------------


def assistant_verify(
    q_orig: SqlQuery,
    q_e: SqlQuery,
    corrector: SqlCorrector,
    llm: LlmHandle,
) -> tuple[SqlQuery, EquivalenceVerdict]:
    """Syntax phase then equivalence phase via the hybrid corrector. A
    failed repair aborts the FSM iteration."""
    report = corrector.check_syntax(q_e)
    if not report.ok:
        try:
            q_e = corrector.repair_syntax(q_e, llm)
        except RepairFailed as exc:
            raise AbortIteration(str(exc)) from exc
    return corrector.verify_equivalence(q_orig, q_e, llm)


# -- decision agent ----------------------------------------------------------------


def plan_characteristics_diff(before: PlanTree, after: PlanTree) -> str:
    def counts(tree: PlanTree) -> dict[str, int]:
        out: dict[str, int] = {}
        for n in tree.iter_nodes():
            out[n.kind] = out.get(n.kind, 0) + 1
        return out

    b, a = counts(before), counts(after)
    parts = []
    for kind in sorted(set(b) | set(a)):
        if b.get(kind, 0) != a.get(kind, 0):
            parts.append(f"{kind} nodes {b.get(kind, 0)} -> {a.get(kind, 0)}")
    return "; ".join(parts) if parts else "no structural plan change observed"


def resource_utilization_summary(plan: PlanTree) -> str:
    # EXPLAIN without ANALYZE exposes no runtime counters; report the
    # memory-hungry operators and their estimated widths instead.
    sorts = [n for n in plan.iter_nodes() if n.kind == "sort"]
    hashes = [n for n in plan.iter_nodes() if n.node_type in ("Hash", "Hash Join", "HashAggregate")]
    parts = []
    if sorts:
        widths = ", ".join(str(n.plan_width or 0) for n in sorts)
        parts.append(f"{len(sorts)} sort node(s) (widths: {widths})")
    if hashes:
        widths = ", ".join(str(n.plan_width or 0) for n in hashes)
        parts.append(f"{len(hashes)} hash node(s) (widths: {widths})")
    return "; ".join(parts) if parts else "none observed"


_VERDICT_TRUE = ("TERMINATE", "ACCEPT")
_VERDICT_FALSE = ("CONTINUE", "REJECT")


def _parse_verdict(reply: str) -> bool:
    """Binary judge; anything unparseable conservatively continues."""
    upper = reply.upper()
    for line in upper.splitlines():
        line = line.strip()
        if line.startswith(_VERDICT_TRUE):
            return True
        if line.startswith(_VERDICT_FALSE):
            return False
    if any(tok in upper for tok in _VERDICT_TRUE):
        return True
    return False


def decision_judge(
    q_orig: SqlQuery,
    q_candidate: SqlQuery,
    cost_before: CostEstimate,
    cost_after: CostEstimate,
    plan_before: PlanTree,
    plan_after: PlanTree,
    llm: LlmHandle,
    corpus: kb.Corpus,
    buffer: membuf.MemoryBuffer,
    iteration: int,
    k: int = 3,
) -> tuple[bool, DecisionReport, list[kb.KbEntry], membuf.MemoryBuffer]:
    """Build the four-dimension report, ask for the binary verdict, and on
    rejection retrieve knowledge-base guidance and store query + report +
    knowledge into the shared buffer for the next round. On acceptance the
    buffer is returned untouched."""
    cost_changes = CostDelta(before=cost_before, after=cost_after)
    characteristics = plan_characteristics_diff(plan_before, plan_after)
    utilization = resource_utilization_summary(plan_after)
    partial = (
        f"cost changes: {cost_changes.render()}\n"
        f"plan characteristics: {characteristics}\n"
        f"resource utilization: {utilization}"
    )
    memory = membuf.render(buffer, "decision")
    reply = llm.ask_text(
        "You judge SQL rewrite quality.",
        load_prompt("decision").format(
            original=q_orig.text,
            candidate=q_candidate.text,
            report=partial,
            memory=f"Context from previous rounds:\n{memory}" if memory else "",
        ),
    )
    verdict = _parse_verdict(reply)
    other = _other_improvements(reply)
    report = DecisionReport(
        cost_changes=cost_changes,
        plan_characteristics=characteristics,
        resource_utilization=utilization,
        other_improvements=other,
        verdict=verdict,
    )
    if verdict:
        return True, report, [], buffer

    retrieval_key = f"{q_candidate.text}\n{report.render()}"
    scored = kb.retrieve(corpus, retrieval_key, k=k)
    retrieved = [entry for entry, _ in scored]
    knowledge_text = "\n\n".join(
        f"[{e.id}] {e.text_que}\n{e.text_ans}" for e in retrieved
    ) or "no relevant knowledge found"
    buffer = membuf.put(
        buffer, membuf.SliceKind.QUERY_INFO,
        f"Original query:\n{q_orig.text}\n\nLatest candidate:\n{q_candidate.text}",
        iteration,
    )
    buffer = membuf.put(buffer, membuf.SliceKind.DECISION_REPORT, report.render(), iteration)
    buffer = membuf.put(buffer, membuf.SliceKind.RETRIEVED_KNOWLEDGE, knowledge_text, iteration)
    return False, report, retrieved, buffer


def _other_improvements(reply: str) -> str:
    lines = [ln.strip() for ln in reply.splitlines() if ln.strip()]
    body = [
        ln
        for ln in lines
        if not ln.upper().startswith(_VERDICT_TRUE + _VERDICT_FALSE)
    ]
    text = " ".join(body).strip()
    return text or "none observed"


def build_report(
    cost_before: CostEstimate,
    cost_after: CostEstimate,
    narrative: str,
    verdict: bool,
    plan_before: Optional[PlanTree] = None,
    plan_after: Optional[PlanTree] = None,
) -> DecisionReport:
    """Report constructor for paths that never reach the decision agent
    (early stop, budget exhaustion, aborts)."""
    if plan_before is not None and plan_after is not None:
        characteristics = plan_characteristics_diff(plan_before, plan_after)
        utilization = resource_utilization_summary(plan_after)
    else:
        characteristics = "none observed"
        utilization = "none observed"
    return DecisionReport(
        cost_changes=CostDelta(before=cost_before, after=cost_after),
        plan_characteristics=characteristics,
        resource_utilization=utilization,
        other_improvements=narrative or "none observed",
        verdict=verdict,
    )
