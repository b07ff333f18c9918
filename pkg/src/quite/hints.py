"""Optimizer hint base and fine-grained hint injection.

The hint base holds five kinds: three join-method vetoes, a cardinality
correction, and a CTE inlining directive. Hints render to the pg_hint_plan
comment grammar bit-exactly and always name explicit relations; no
session-level (GUC) settings are ever emitted. Plan analysis proposes
hints per join node and per cardinality estimate; selection keeps only
hints whose EXPLAIN cost does not regress and gates the composed set with
the execution oracle when one is configured.

Servers without the pg_hint_plan extension get a compatibility mode for the
CTE directive: the WITH clause is rewritten to `AS NOT MATERIALIZED`
(core PostgreSQL >= 12 syntax); other kinds become inert comments there.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from quite.core import SqlQuery
from quite.db.base import Database, SyntaxRejected, results_equal
from quite.db.plan import PlanNode, PlanTree
from quite.db.base import StatsSnapshot
from quite.llm import LlmHandle

log = logging.getLogger(__name__)

DEFAULT_SMALL_CTE_ROWS = 1000.0


class HintKind(str, enum.Enum):
    NO_HASH_JOIN = "NoHashJoin"
    NO_NEST_LOOP = "NoNestLoop"
    NO_MERGE_JOIN = "NoMergeJoin"
    ROWS = "Rows"
    NO_MATERIALIZE = "NO_MATERIALIZE"


JOIN_VETO_KINDS = (HintKind.NO_HASH_JOIN, HintKind.NO_NEST_LOOP, HintKind.NO_MERGE_JOIN)

# Plan node type -> the veto that forbids that join method.
JOIN_NODE_VETO = {
    "Hash Join": HintKind.NO_HASH_JOIN,
    "Nested Loop": HintKind.NO_NEST_LOOP,
    "Merge Join": HintKind.NO_MERGE_JOIN,
}


class InvariantViolation(Exception):
    pass


class AlreadyHinted(Exception):
    pass


@dataclass(frozen=True)
class Hint:
    kind: HintKind
    tables: tuple[str, ...]
    row_value: Optional[int] = None
    justification: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.tables:
            raise InvariantViolation("a hint must target at least one relation")
        if self.kind in JOIN_VETO_KINDS and len(self.tables) < 2:
            raise InvariantViolation(f"{self.kind.value} requires at least two relations")
        if self.kind is HintKind.ROWS:
            if len(self.tables) < 2:
                raise InvariantViolation("Rows requires at least two relations")
            if self.row_value is None or self.row_value <= 0:
                raise InvariantViolation("Rows requires a positive row_value")
        elif self.row_value is not None:
            raise InvariantViolation(f"{self.kind.value} does not take a row_value")
        if self.kind is HintKind.NO_MATERIALIZE and len(self.tables) != 1:
            raise InvariantViolation("NO_MATERIALIZE targets exactly one CTE name")

    def render(self) -> str:
        args = " ".join(self.tables)
        if self.kind is HintKind.ROWS:
            return f"Rows({args} #{self.row_value})"
        return f"{self.kind.value}({args})"


@dataclass(frozen=True)
class HintSet:
    hints: tuple[Hint, ...] = ()

    def __init__(self, hints: Sequence[Hint] = ()):
        object.__setattr__(self, "hints", tuple(hints))
        self._validate()

    def _validate(self) -> None:
        seen: set[tuple[HintKind, frozenset[str]]] = set()
        veto_cover: dict[frozenset[str], set[HintKind]] = {}
        for hint in self.hints:
            key = (hint.kind, frozenset(hint.tables))
            if key in seen:
                raise InvariantViolation(
                    f"duplicate {hint.kind.value} hint for tables {sorted(hint.tables)}"
                )
            seen.add(key)
            if hint.kind in JOIN_VETO_KINDS:
                cover = veto_cover.setdefault(frozenset(hint.tables), set())
                cover.add(hint.kind)
                if len(cover) == len(JOIN_VETO_KINDS):
                    raise InvariantViolation(
                        f"vetoing all join methods for {sorted(hint.tables)}"
                    )

    def __bool__(self) -> bool:
        return bool(self.hints)


def build_consistent(hints: Sequence[Hint]) -> HintSet:
    """Greedily keep hints in order, dropping any that would violate the
    HintSet invariants (duplicates, all-three-vetoes for one pair)."""
    kept: list[Hint] = []
    for hint in hints:
        try:
            candidate = HintSet(kept + [hint])
        except InvariantViolation as exc:
            log.info("dropping hint %s: %s", hint.render(), exc)
            continue
        kept = list(candidate.hints)
    return HintSet(kept)


def render(hs: HintSet) -> str:
    """Single leading comment block, one hint per line, pg_hint_plan grammar.
    An empty set renders to the empty string (no comment block)."""
    if not hs.hints:
        return ""
    lines = "\n".join(f"  {h.render()}" for h in hs.hints)
    return f"/*+\n{lines}\n*/"


_HINT_LINE_RE = re.compile(r"^\s*([A-Za-z_]+)\(([^)]*)\)\s*$")
_BLOCK_RE = re.compile(r"^\s*/\*\+(.*?)\*/", re.DOTALL)

_KIND_BY_NAME = {k.value: k for k in HintKind}


def parse_hint_block(text: str) -> HintSet:
    """Parse a leading hint comment block back into a HintSet.
    render/parse round-trips bit-exactly (justifications excluded)."""
    m = _BLOCK_RE.match(text)
    if not m:
        return HintSet(())
    hints: list[Hint] = []
    for line in m.group(1).splitlines():
        line = line.strip()
        if not line:
            continue
        lm = _HINT_LINE_RE.match(line)
        if not lm:
            raise InvariantViolation(f"unparseable hint line: {line!r}")
        name, args = lm.group(1), lm.group(2).split()
        kind = _KIND_BY_NAME.get(name)
        if kind is None:
            raise InvariantViolation(f"unknown hint kind: {name!r}")
        if kind is HintKind.ROWS:
            if not args or not args[-1].startswith("#"):
                raise InvariantViolation(f"Rows hint missing #value: {line!r}")
            hints.append(
                Hint(kind=kind, tables=tuple(args[:-1]), row_value=int(args[-1][1:]))
            )
        else:
            hints.append(Hint(kind=kind, tables=tuple(args)))
    return HintSet(hints)


def inject(q: SqlQuery, hs: HintSet) -> SqlQuery:
    """Prepend the rendered hint block to the statement. Queries that
    already start with a hint block are refused."""
    if q.text.lstrip().startswith("/*+"):
        raise AlreadyHinted("query already carries a hint block")
    block = render(hs)
    if not block:
        return q
    return SqlQuery(text=f"{block}\n{q.text}", dialect=q.dialect)


def rewrite_cte_not_materialized(sql: str, cte_name: str) -> str:
    """Compatibility mode for NO_MATERIALIZE: rewrite the named CTE's
    definition to `AS NOT MATERIALIZED (...)`."""
    pattern = re.compile(
        rf"(\b{re.escape(cte_name)}\b(?:\s*\([^)]*\))?\s+AS\s+)(?:(?:NOT\s+)?MATERIALIZED\s+)?\(",
        re.IGNORECASE,
    )
    return pattern.sub(lambda m: m.group(1) + "NOT MATERIALIZED (", sql, count=1)


def apply_hints(q: SqlQuery, hs: HintSet, supports_extension: bool) -> SqlQuery:
    """Materialize a hint set onto a query for the target server.

    With pg_hint_plan available everything is injected as a hint block.
    Without it, NO_MATERIALIZE hints become `AS NOT MATERIALIZED` rewrites
    and the remaining kinds are still injected (inert comments) with a
    warning, keeping the emitted SQL self-describing.
    """
    if not hs.hints:
        return q
    if supports_extension:
        return inject(q, hs)
    text = q.text
    rest: list[Hint] = []
    for hint in hs.hints:
        if hint.kind is HintKind.NO_MATERIALIZE:
            text = rewrite_cte_not_materialized(text, hint.tables[0])
        else:
            rest.append(hint)
    result = SqlQuery(text=text, dialect=q.dialect)
    if rest:
        log.warning(
            "pg_hint_plan unavailable: %d hint(s) injected as inert comments",
            len(rest),
        )
        result = inject(result, HintSet(rest))
    return result


@dataclass(frozen=True)
class HintSuggestion:
    issue: str
    hint: Hint


_JOIN_CHECK_SYSTEM = "You review PostgreSQL physical plan choices."
_JOIN_CHECK_USER = (
    "Join node: {node_type} over relations {tables} "
    "(estimated {rows:.0f} result rows).\nTable statistics:\n{stats}\n\n"
    "Is this join operator suitable here? Reply SUITABLE or UNSUITABLE "
    "with a one-line reason."
)
_ROWS_CHECK_USER = (
    "Join node: {node_type} over relations {tables}, optimizer estimates "
    "{rows:.0f} result rows.\nTable statistics:\n{stats}\n\n"
    "Is this cardinality estimate reasonable? Reply REASONABLE, or "
    "UNREASONABLE recommend <rows> with a one-line justification."
)

_RECOMMEND_RE = re.compile(r"recommend\w*\s*[:=]?\s*#?(\d+)", re.IGNORECASE)


def _node_tables(plan: PlanTree, node: PlanNode, limit: int = 4) -> tuple[str, ...]:
    rels = plan.base_relations(node)
    deduped: list[str] = []
    for r in rels:
        if r not in deduped:
            deduped.append(r)
    return tuple(deduped[:limit])


def analyze_plan(
    plan: PlanTree,
    stats: StatsSnapshot,
    llm: Optional[LlmHandle] = None,
    small_cte_rows: float = DEFAULT_SMALL_CTE_ROWS,
) -> list[HintSuggestion]:
    """Propose hints for a plan.

    For each join node the LLM (or an offline heuristic) judges whether the
    chosen join operator is suitable and whether its cardinality estimate
    is reasonable; unsuitable operators yield the matching veto, bad
    estimates yield Rows corrections with a justification. NO_MATERIALIZE
    is suggested for a CTE referenced exactly once, or one that is small
    (estimated rows <= threshold) and aggregate-free.
    """
    suggestions: list[HintSuggestion] = []

    for name, scan_count in sorted(plan.cte_scan_counts().items()):
        sub = plan.cte_subplan(name)
        rows = sub.plan_rows if sub else 0.0
        has_aggregate = (
            any(n.kind == "aggregate" for n in sub.walk()) if sub is not None else False
        )
        if scan_count == 1:
            issue = f"CTE {name} is referenced once; materialization buys nothing"
        elif rows <= small_cte_rows and not has_aggregate:
            issue = f"CTE {name} is small (~{rows:.0f} rows) and simple; inline it"
        else:
            continue
        suggestions.append(
            HintSuggestion(
                issue=issue,
                hint=Hint(
                    kind=HintKind.NO_MATERIALIZE,
                    tables=(name,),
                    justification=issue,
                ),
            )
        )

    stats_text = stats.render() or "no statistics available"
    for node in plan.joins():
        tables = _node_tables(plan, node)
        if len(tables) < 2:
            continue
        veto_kind = JOIN_NODE_VETO.get(node.node_type)

        if llm is not None:
            reply = llm.ask_text(
                _JOIN_CHECK_SYSTEM,
                _JOIN_CHECK_USER.format(
                    node_type=node.node_type,
                    tables=" ".join(tables),
                    rows=node.plan_rows,
                    stats=stats_text,
                ),
            )
            unsuitable = "UNSUITABLE" in reply.upper()
            join_reason = reply.strip()
        else:
            unsuitable, join_reason = _heuristic_join_check(node, tables, stats)
        if unsuitable and veto_kind is not None:
            suggestions.append(
                HintSuggestion(
                    issue=f"{node.node_type} over {' '.join(tables)} looks unsuitable",
                    hint=Hint(kind=veto_kind, tables=tables, justification=join_reason),
                )
            )

        if llm is not None:
            reply = llm.ask_text(
                _JOIN_CHECK_SYSTEM,
                _ROWS_CHECK_USER.format(
                    node_type=node.node_type,
                    tables=" ".join(tables),
                    rows=node.plan_rows,
                    stats=stats_text,
                ),
            )
            if "UNREASONABLE" in reply.upper():
                m = _RECOMMEND_RE.search(reply)
                if m:
                    suggestions.append(
                        HintSuggestion(
                            issue=f"estimate {node.plan_rows:.0f} rows for "
                            f"{' '.join(tables)} judged unreasonable",
                            hint=Hint(
                                kind=HintKind.ROWS,
                                tables=tables[:2],
                                row_value=int(m.group(1)),
                                justification=reply.strip(),
                            ),
                        )
                    )
        else:
            rows_hint = _heuristic_rows_check(node, tables, stats)
            if rows_hint is not None:
                suggestions.append(rows_hint)
    return suggestions


def _heuristic_join_check(
    node: PlanNode, tables: tuple[str, ...], stats: StatsSnapshot
) -> tuple[bool, str]:
    sizes = [stats.tables[t].row_count for t in tables if t in stats.tables]
    if node.node_type == "Nested Loop" and len(sizes) >= 2:
        if sorted(sizes)[-2] >= 10_000:
            return True, "nested loop over two large inputs; O(n*m) work expected"
    return False, "operator consistent with input sizes"


def _heuristic_rows_check(
    node: PlanNode, tables: tuple[str, ...], stats: StatsSnapshot
) -> Optional[HintSuggestion]:
    sizes = [stats.tables[t].row_count for t in tables if t in stats.tables]
    if len(sizes) < 2:
        return None
    product = 1.0
    for s in sizes:
        product *= max(s, 1.0)
    if node.plan_rows <= 1.0 and product >= 1e6:
        recommended = int(max(min(sizes), 10))
        reason = (
            f"estimate of {node.plan_rows:.0f} rows is implausible for inputs "
            f"totalling {product:.0f} combinations; recommend ~{recommended}"
        )
        return HintSuggestion(
            issue=f"suspicious 1-row estimate for {' '.join(tables)}",
            hint=Hint(
                kind=HintKind.ROWS,
                tables=tables[:2],
                row_value=recommended,
                justification=reason,
            ),
        )
    return None


def select_hints(
    suggestions: Sequence[HintSuggestion],
    q: SqlQuery,
    db: Database,
    oracle_db: Optional[Database] = None,
) -> HintSet:
    """Keep suggested hints that do not regress the EXPLAIN cost when
    applied individually, compose them consistently, and (when an oracle
    database is configured) require the fully hinted query to produce the
    same results as the unhinted one; otherwise no hints are emitted."""
    try:
        _, base_cost = db.explain(q)
    except SyntaxRejected:
        return HintSet(())
    survivors: list[Hint] = []
    for suggestion in suggestions:
        try:
            hinted = inject(q, HintSet([suggestion.hint]))
        except AlreadyHinted:
            return HintSet(())
        try:
            _, cost = db.explain(hinted)
        except SyntaxRejected:
            continue
        if cost.total_cost <= base_cost.total_cost:
            survivors.append(suggestion.hint)
        else:
            log.info(
                "dropping hint %s: cost %.2f -> %.2f",
                suggestion.hint.render(),
                base_cost.total_cost,
                cost.total_cost,
            )
    hs = build_consistent(survivors)
    if oracle_db is not None and hs.hints:
        hinted = apply_hints(q, hs, db.supports_pg_hint_plan())
        if not results_equal(oracle_db, q, hinted):
            log.warning("hinted query failed the execution oracle; dropping all hints")
            return HintSet(())
    return hs
