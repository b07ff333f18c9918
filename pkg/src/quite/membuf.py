"""Shared agent memory buffer.

Each FSM stage reads from and writes to a small set of typed slices instead
of replaying the whole conversation. A slice holds the latest essential
text for its category only; putting a slice replaces the previous one, so
prompt size stays bounded no matter how many iterations run. Full history
lives in the session transcript log, never in prompts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

TRUNCATION_MARKER = "[...truncated] "

DEFAULT_SLICE_CAP = 4000


class SliceKind(str, enum.Enum):
    QUERY_INFO = "query_info"
    REWRITE_PROPOSALS = "rewrite_proposals"
    RETRIEVED_KNOWLEDGE = "retrieved_knowledge"
    DECISION_REPORT = "decision_report"
    PLAN_SUMMARY = "plan_summary"


# Fixed rendering order; roles see a subset of kinds.
RENDER_ORDER = (
    SliceKind.QUERY_INFO,
    SliceKind.PLAN_SUMMARY,
    SliceKind.REWRITE_PROPOSALS,
    SliceKind.RETRIEVED_KNOWLEDGE,
    SliceKind.DECISION_REPORT,
)

ROLE_SLICES: dict[str, tuple[SliceKind, ...]] = {
    "reasoning": RENDER_ORDER,
    "rewrite": (
        SliceKind.QUERY_INFO,
        SliceKind.PLAN_SUMMARY,
        SliceKind.REWRITE_PROPOSALS,
        SliceKind.RETRIEVED_KNOWLEDGE,
    ),
    "assistant": (SliceKind.QUERY_INFO,),
    "decision": RENDER_ORDER,
}


@dataclass(frozen=True)
class MemorySlice:
    kind: SliceKind
    content: str
    updated_at_iteration: int


@dataclass(frozen=True)
class MemoryBuffer:
    """Immutable mapping of slice kind -> latest slice. `put` returns a new
    buffer, which makes replacement idempotence trivial to reason about."""

    slices: Mapping[SliceKind, MemorySlice] = field(
        default_factory=lambda: MappingProxyType({})
    )
    per_slice_cap: int = DEFAULT_SLICE_CAP

    def get(self, kind: SliceKind) -> MemorySlice | None:
        return self.slices.get(kind)


def _truncate(content: str, cap: int) -> str:
    # Head-truncation: keep the most recent tail, spend part of the cap on
    # the marker so the stored content never exceeds the cap.
    if len(content) <= cap:
        return content
    keep = cap - len(TRUNCATION_MARKER)
    if keep <= 0:
        return content[-cap:]
    return TRUNCATION_MARKER + content[-keep:]


def put(buffer: MemoryBuffer, kind: SliceKind, content: str, iteration: int) -> MemoryBuffer:
    """Replace the slice of `kind` with new content, truncated to the cap."""
    stored = _truncate(content, buffer.per_slice_cap)
    new = dict(buffer.slices)
    new[kind] = MemorySlice(kind=kind, content=stored, updated_at_iteration=iteration)
    return MemoryBuffer(slices=MappingProxyType(new), per_slice_cap=buffer.per_slice_cap)


def render(buffer: MemoryBuffer, for_agent: str) -> str:
    """Deterministic rendering of the slices relevant to an agent role.

    Absent slices are simply skipped (no placeholders), so an empty buffer
    renders to the empty string.
    """
    kinds = ROLE_SLICES.get(for_agent, RENDER_ORDER)
    parts = []
    for kind in RENDER_ORDER:
        if kind not in kinds:
            continue
        sl = buffer.get(kind)
        if sl is None:
            continue
        parts.append(f"## {kind.value}\n{sl.content}")
    return "\n\n".join(parts)
