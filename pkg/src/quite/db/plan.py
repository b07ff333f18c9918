"""Optimizer plan trees parsed from EXPLAIN (FORMAT JSON) documents."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

# Node Type -> coarse operator kind. Anything unknown maps to "other".
_SCAN_TYPES = {
    "Seq Scan",
    "Index Scan",
    "Index Only Scan",
    "Bitmap Heap Scan",
    "Bitmap Index Scan",
    "Tid Scan",
    "Subquery Scan",
    "Function Scan",
    "Values Scan",
    "Foreign Scan",
    "CTE Scan",
    "WorkTable Scan",
}
_JOIN_TYPES = {"Nested Loop", "Hash Join", "Merge Join"}
_AGG_TYPES = {"Aggregate", "GroupAggregate", "HashAggregate", "WindowAgg", "Group"}
_SORT_TYPES = {"Sort", "Incremental Sort"}


@dataclass
class PlanNode:
    node_type: str
    startup_cost: float = 0.0
    total_cost: float = 0.0
    plan_rows: float = 0.0
    relation: Optional[str] = None
    alias: Optional[str] = None
    cte_name: Optional[str] = None
    subplan_name: Optional[str] = None
    join_type: Optional[str] = None
    plan_width: Optional[int] = None
    children: list["PlanNode"] = field(default_factory=list)

    @property
    def kind(self) -> str:
        if self.node_type in _JOIN_TYPES:
            return "join"
        if self.node_type in _SCAN_TYPES:
            return "scan"
        if self.node_type in _AGG_TYPES:
            return "aggregate"
        if self.node_type in _SORT_TYPES:
            return "sort"
        return "other"

    def walk(self) -> Iterator["PlanNode"]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class PlanTree:
    root: PlanNode

    def iter_nodes(self) -> Iterator[PlanNode]:
        return self.root.walk()

    def find(self, pred: Callable[[PlanNode], bool]) -> list[PlanNode]:
        return [n for n in self.iter_nodes() if pred(n)]

    def joins(self) -> list[PlanNode]:
        return self.find(lambda n: n.kind == "join")

    def cte_scan_counts(self) -> dict[str, int]:
        """How many times each CTE is scanned in the plan."""
        counts: dict[str, int] = {}
        for n in self.iter_nodes():
            if n.node_type == "CTE Scan" and n.cte_name:
                counts[n.cte_name] = counts.get(n.cte_name, 0) + 1
        return counts

    def cte_subplan(self, cte_name: str) -> Optional[PlanNode]:
        """The init-plan subtree that computes a named CTE, if present."""
        wanted = f"CTE {cte_name}"
        for n in self.iter_nodes():
            if n.subplan_name == wanted:
                return n
        return None

    def base_relations(self, node: Optional[PlanNode] = None) -> list[str]:
        """Relation names (alias preferred) scanned under a node, in plan order."""
        start = node or self.root
        names: list[str] = []
        for n in start.walk():
            if n.kind == "scan" and (n.alias or n.relation):
                names.append(n.alias or n.relation)  # type: ignore[arg-type]
        return names


def _parse_node(raw: dict) -> PlanNode:
    node = PlanNode(
        node_type=raw.get("Node Type", "Unknown"),
        startup_cost=float(raw.get("Startup Cost", 0.0)),
        total_cost=float(raw.get("Total Cost", 0.0)),
        plan_rows=float(raw.get("Plan Rows", 0.0)),
        relation=raw.get("Relation Name"),
        alias=raw.get("Alias"),
        cte_name=raw.get("CTE Name"),
        subplan_name=raw.get("Subplan Name"),
        join_type=raw.get("Join Type"),
        plan_width=raw.get("Plan Width"),
    )
    if node.plan_rows < 0:
        raise ValueError(f"negative Plan Rows on {node.node_type}")
    for child in raw.get("Plans", []):
        node.children.append(_parse_node(child))
    return node


def parse_explain_json(doc) -> PlanTree:
    """Parse the JSON document EXPLAIN (FORMAT JSON) returns.

    Accepts the server shape (a list of {"Plan": {...}}), a bare
    {"Plan": {...}} object, or a bare plan node.
    """
    if isinstance(doc, str):
        import json

        doc = json.loads(doc)
    if isinstance(doc, list):
        if not doc:
            raise ValueError("empty EXPLAIN document")
        doc = doc[0]
    if not isinstance(doc, dict):
        raise ValueError(f"unexpected EXPLAIN document type: {type(doc).__name__}")
    raw = doc.get("Plan", doc)
    return PlanTree(root=_parse_node(raw))


def plan_summary(tree: PlanTree) -> str:
    """One-line-per-node rendering used in prompts and reports."""
    lines: list[str] = []

    def visit(node: PlanNode, depth: int) -> None:
        target = f" on {node.alias or node.relation}" if (node.alias or node.relation) else ""
        if node.cte_name:
            target = f" on CTE {node.cte_name}"
        lines.append(
            f"{'  ' * depth}{node.node_type}{target} "
            f"(cost={node.startup_cost:.2f}..{node.total_cost:.2f} rows={node.plan_rows:.0f})"
        )
        for child in node.children:
            visit(child, depth + 1)

    visit(tree.root, 0)
    return "\n".join(lines)
