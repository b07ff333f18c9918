from hypothesis import given, strategies as st

from quite.membuf import (
    DEFAULT_SLICE_CAP,
    MemoryBuffer,
    RENDER_ORDER,
    ROLE_SLICES,
    SliceKind,
    TRUNCATION_MARKER,
    put,
    render,
)


class TestPut:
    def test_put_into_empty(self):
        b = put(MemoryBuffer(), SliceKind.QUERY_INFO, "Q0: SELECT 1", 0)
        sl = b.get(SliceKind.QUERY_INFO)
        assert sl is not None and sl.content == "Q0: SELECT 1"
        assert sl.updated_at_iteration == 0

    def test_replacement_not_append(self):
        b = put(MemoryBuffer(), SliceKind.QUERY_INFO, "first", 0)
        b = put(b, SliceKind.QUERY_INFO, "second", 1)
        sl = b.get(SliceKind.QUERY_INFO)
        assert sl.content == "second"
        assert sl.updated_at_iteration == 1
        assert len(b.slices) == 1

    def test_over_cap_stores_tail_with_marker(self):
        content = "x" * 6000 + "TAIL"
        b = put(MemoryBuffer(), SliceKind.PLAN_SUMMARY, content, 0)
        stored = b.get(SliceKind.PLAN_SUMMARY).content
        assert len(stored) == DEFAULT_SLICE_CAP
        assert stored.startswith(TRUNCATION_MARKER)
        assert stored.endswith("TAIL")

    def test_put_is_idempotent(self):
        b0 = put(MemoryBuffer(), SliceKind.DECISION_REPORT, "report", 2)
        assert put(b0, SliceKind.DECISION_REPORT, "report", 2) == b0

    def test_original_buffer_unchanged(self):
        b0 = MemoryBuffer()
        put(b0, SliceKind.QUERY_INFO, "x", 0)
        assert b0.get(SliceKind.QUERY_INFO) is None


class TestRender:
    def test_empty_buffer_renders_empty(self):
        assert render(MemoryBuffer(), "reasoning") == ""

    def test_fixed_ordering(self):
        b = MemoryBuffer()
        b = put(b, SliceKind.RETRIEVED_KNOWLEDGE, "K", 0)
        b = put(b, SliceKind.QUERY_INFO, "Q", 0)
        out = render(b, "reasoning")
        assert out.index("query_info") < out.index("retrieved_knowledge")

    def test_absent_slice_emits_no_placeholder(self):
        b = put(MemoryBuffer(), SliceKind.QUERY_INFO, "Q", 0)
        out = render(b, "decision")
        assert "retrieved_knowledge" not in out

    def test_role_filtering(self):
        b = put(MemoryBuffer(), SliceKind.DECISION_REPORT, "R", 0)
        assert "decision_report" not in render(b, "assistant")
        assert "decision_report" in render(b, "decision")


slice_kinds = st.sampled_from(list(SliceKind))
contents = st.text(min_size=0, max_size=12_000)


@given(st.lists(st.tuples(slice_kinds, contents), max_size=12), st.sampled_from(list(ROLE_SLICES)))
def test_bounded_context_property(puts, role):
    b = MemoryBuffer()
    for i, (kind, content) in enumerate(puts):
        b = put(b, kind, content, i)
    rendered = render(b, role)
    # Bound: per-slice caps plus fixed header/joiner overhead.
    overhead = sum(len(f"## {k.value}\n") + 2 for k in RENDER_ORDER)
    assert len(rendered) <= len(RENDER_ORDER) * b.per_slice_cap + overhead
    for sl in b.slices.values():
        assert len(sl.content) <= b.per_slice_cap
