import json

import pytest
from hypothesis import given, strategies as st

from quite.llm import (
    BudgetExceeded,
    ChatMessage,
    HttpChatProvider,
    LlmHandle,
    ProviderConfig,
    ScriptEntry,
    ScriptedProvider,
    Transcript,
    TransportError,
    extract_sql,
    split_reasoning,
)


def msg(text: str) -> list[ChatMessage]:
    return [ChatMessage("user", text)]


class TestScriptedProvider:
    def test_positional_script(self):
        p = ScriptedProvider(["OK"])
        assert p.complete(msg("anything"), ProviderConfig()) == "OK"

    def test_substring_matcher(self):
        p = ScriptedProvider(
            [ScriptEntry(response="analysis", match="EXPLAIN"), ScriptEntry(response="other")]
        )
        assert p.complete(msg("please EXPLAIN this"), ProviderConfig()) == "analysis"
        assert p.complete(msg("no match here"), ProviderConfig()) == "other"

    def test_exhaustion_raises_budget_exceeded(self):
        p = ScriptedProvider(["only one"])
        p.complete(msg("a"), ProviderConfig())
        with pytest.raises(BudgetExceeded):
            p.complete(msg("b"), ProviderConfig())

    def test_replay_determinism(self):
        requests = ["first EXPLAIN", "second", "third"]
        script = [
            ScriptEntry(response="r1", match="EXPLAIN"),
            ScriptEntry(response="r2"),
            ScriptEntry(response="r3"),
        ]
        runs = []
        for _ in range(2):
            p = ScriptedProvider(script)
            runs.append([p.complete(msg(r), ProviderConfig()) for r in requests])
        assert runs[0] == runs[1]

    def test_from_json(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps(["plain", {"response": "matched", "match": "KEY"}]))
        p = ScriptedProvider.from_json(path)
        assert p.complete(msg("KEY present"), ProviderConfig()) == "matched"
        assert p.complete(msg("anything"), ProviderConfig()) == "plain"

    def test_empty_messages_rejected(self):
        with pytest.raises(ValueError):
            ScriptedProvider(["x"]).complete([], ProviderConfig())


class TestChatMessage:
    def test_role_validation(self):
        with pytest.raises(ValueError):
            ChatMessage("robot", "hi")

    def test_empty_content_rejected(self):
        with pytest.raises(ValueError):
            ChatMessage("user", "")


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload or {}
        self.text = text

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def completion(text: str) -> dict:
    return {"choices": [{"message": {"content": text}}]}


class TestHttpChatProvider:
    def config(self, retries=2):
        return ProviderConfig(endpoint="http://llm.test/v1/chat", model_name="m", max_retries=retries)

    def test_success_and_wire_format(self):
        session = FakeSession([FakeResponse(payload=completion("hello"))])
        p = HttpChatProvider(session=session)
        out = p.complete(msg("hi"), self.config())
        assert out == "hello"
        sent = session.calls[0]["json"]
        assert sent["model"] == "m"
        assert sent["messages"] == [{"role": "user", "content": "hi"}]
        assert sent["temperature"] == 0.0
        assert "max_tokens" in sent

    def test_retries_transient_then_succeeds(self):
        session = FakeSession(
            [ConnectionError("boom"), FakeResponse(status_code=503), FakeResponse(payload=completion("ok"))]
        )
        p = HttpChatProvider(session=session)
        assert p.complete(msg("hi"), self.config(retries=2)) == "ok"
        assert len(session.calls) == 3

    def test_exhausted_retries_raise_transport_error(self):
        session = FakeSession([ConnectionError("a"), ConnectionError("b"), ConnectionError("c")])
        p = HttpChatProvider(session=session)
        with pytest.raises(TransportError):
            p.complete(msg("hi"), self.config(retries=2))

    def test_hard_http_error_does_not_retry(self):
        session = FakeSession([FakeResponse(status_code=400, text="bad request")])
        p = HttpChatProvider(session=session)
        with pytest.raises(TransportError):
            p.complete(msg("hi"), self.config())
        assert len(session.calls) == 1

    def test_missing_endpoint(self, monkeypatch):
        monkeypatch.delenv("QUITE_LLM_ENDPOINT", raising=False)
        p = HttpChatProvider(session=FakeSession([]))
        with pytest.raises(TransportError):
            p.complete(msg("hi"), ProviderConfig(endpoint=""))


class TestExtractSql:
    def test_single_fenced_block(self):
        assert extract_sql("```sql\nSELECT 1;\n```") == ["SELECT 1;"]

    def test_no_sql(self):
        assert extract_sql("no sql here") == []

    def test_two_blocks_document_order(self):
        text = "first\n```sql\nSELECT 1;\n```\nthen\n```sql\nSELECT 2;\n```"
        assert extract_sql(text) == ["SELECT 1;", "SELECT 2;"]

    def test_keyword_scan_fallback(self):
        text = "Here you go:\nSELECT a\nFROM t;\nhope that helps"
        assert extract_sql(text) == ["SELECT a\nFROM t;"]

    def test_multiple_statements_in_one_block(self):
        assert extract_sql("```sql\nSELECT 1;\nSELECT 2;\n```") == ["SELECT 1;", "SELECT 2;"]

    def test_with_statement(self):
        text = "WITH c AS (SELECT 1 AS x)\nSELECT x FROM c"
        assert extract_sql(text) == [text]

    @given(
        st.sampled_from(
            [
                "SELECT 1;",
                "SELECT a\nFROM t\nWHERE a > 1;",
                "WITH c AS (SELECT 1 AS x)\nSELECT x FROM c",
                "SELECT a,\n\n  b\nFROM t",
                "UPDATE t SET a = 1;",
            ]
        )
    )
    def test_idempotent_over_own_output(self, stmt):
        first = extract_sql(stmt)
        assert first, stmt
        for s in first:
            assert extract_sql(s) == [s]

    def test_idempotent_over_fenced_extraction(self):
        block = "```sql\nSELECT a,\n\n  b\nFROM t\n```"
        [stmt] = extract_sql(block)
        assert extract_sql(stmt) == [stmt]


class TestSplitReasoning:
    def test_marked_boundary(self):
        thinking, answer = split_reasoning("<think>chain of thought</think>The answer")
        assert thinking == "chain of thought"
        assert answer == "The answer"

    def test_no_marker(self):
        thinking, answer = split_reasoning("plain answer")
        assert thinking == ""
        assert answer == "plain answer"


def test_handle_records_transcript():
    t = Transcript()
    h = LlmHandle(ScriptedProvider(["pong"]), ProviderConfig(), agent="tester", transcript=t)
    assert h.ask_text("sys", "ping") == "pong"
    assert len(t.entries) == 1
    assert t.entries[0].agent == "tester"
    assert t.to_jsonable()[0]["response"] == "pong"
