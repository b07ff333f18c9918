"""Chat-completion provider layer.

Every agent talks through `Provider.complete`. Two implementations ship:
an HTTP client for OpenAI-style chat-completion endpoints, and a scripted
mock that replays canned responses deterministically so the whole pipeline
can run offline in tests. `LlmHandle` bundles a provider with its config,
an agent name and a transcript, giving call sites a one-method surface.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

ROLE_VALUES = ("system", "user", "assistant")

ENV_ENDPOINT = "QUITE_LLM_ENDPOINT"
ENV_KEY = "QUITE_LLM_KEY"


class TransportError(Exception):
    """Network/HTTP failure that survived the retry budget."""


class BudgetExceeded(Exception):
    """Token/time/script budget exhausted."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLE_VALUES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = ""
    model_name: str = "scripted"
    temperature: float = 0.0
    max_output_tokens: int = 4096
    timeout_seconds: float = 60.0
    max_retries: int = 2
    api_key: Optional[str] = None


class Provider:
    """Interface: turn a message list into model output text."""

    def complete(self, messages: Sequence[ChatMessage], config: ProviderConfig) -> str:
        raise NotImplementedError


class HttpChatProvider(Provider):
    """Client for an OpenAI-style /chat/completions endpoint.

    Wire format: POST {model, messages[{role, content}], temperature,
    max_tokens}. Endpoint and bearer token default to the QUITE_LLM_ENDPOINT
    and QUITE_LLM_KEY environment variables. Transient transport failures
    are retried up to config.max_retries with linear backoff.
    """

    RETRYABLE_STATUS = (408, 429, 500, 502, 503, 504)

    def __init__(self, session=None):
        import requests

        self._session = session or requests.Session()

    def complete(self, messages: Sequence[ChatMessage], config: ProviderConfig) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        endpoint = config.endpoint or os.environ.get(ENV_ENDPOINT, "")
        if not endpoint:
            raise TransportError("no endpoint configured (set QUITE_LLM_ENDPOINT)")
        key = config.api_key or os.environ.get(ENV_KEY, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": config.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": config.temperature,
            "max_tokens": config.max_output_tokens,
        }
        last_err: Exception | None = None
        for attempt in range(config.max_retries + 1):
            try:
                resp = self._session.post(
                    endpoint, json=payload, headers=headers, timeout=config.timeout_seconds
                )
                if resp.status_code in self.RETRYABLE_STATUS:
                    last_err = TransportError(f"HTTP {resp.status_code}")
                elif resp.status_code != 200:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                else:
                    return self._extract_text(resp.json())
            except TransportError:
                raise
            except Exception as exc:  # connection/timeout/JSON errors
                last_err = exc
            if attempt < config.max_retries:
                time.sleep(0.2 * (attempt + 1))
        raise TransportError(f"request failed after {config.max_retries + 1} attempts: {last_err}")

    @staticmethod
    def _extract_text(doc: dict) -> str:
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}")


@dataclass(frozen=True)
class ScriptEntry:
    """One canned response. `match` is a substring matcher over the request
    messages; None means the entry matches any request (positional use)."""

    response: str
    match: Optional[str] = None


class ScriptedProvider(Provider):
    """Deterministic mock: entries are consumed in order.

    Each request takes the first unconsumed entry whose matcher matches
    (substring over the concatenated message contents, or no matcher at
    all). Replaying an identical request sequence therefore yields an
    identical response sequence. An exhausted script raises BudgetExceeded.
    """

    def __init__(self, entries: Iterable[ScriptEntry | str]):
        self._entries: list[ScriptEntry] = [
            e if isinstance(e, ScriptEntry) else ScriptEntry(response=e) for e in entries
        ]
        self._consumed = [False] * len(self._entries)
        self._lock = threading.Lock()

    @classmethod
    def from_json(cls, path: str | Path) -> "ScriptedProvider":
        """Load a script file: a JSON list of strings or of
        {"response": ..., "match": ...} objects."""
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        entries: list[ScriptEntry] = []
        for item in raw:
            if isinstance(item, str):
                entries.append(ScriptEntry(response=item))
            else:
                entries.append(ScriptEntry(response=item["response"], match=item.get("match")))
        return cls(entries)

    def complete(self, messages: Sequence[ChatMessage], config: ProviderConfig) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        blob = "\n".join(m.content for m in messages)
        with self._lock:
            # Substring-matched entries act as routes and win over
            # positional (matcher-less) entries.
            for i, entry in enumerate(self._entries):
                if not self._consumed[i] and entry.match is not None and entry.match in blob:
                    self._consumed[i] = True
                    return entry.response
            for i, entry in enumerate(self._entries):
                if not self._consumed[i] and entry.match is None:
                    self._consumed[i] = True
                    return entry.response
        raise BudgetExceeded("scripted provider exhausted")

    @property
    def remaining(self) -> int:
        with self._lock:
            return self._consumed.count(False)


_FENCE_RE = re.compile(r"```(?:sql)?\s*\n(.*?)```", re.DOTALL | re.IGNORECASE)
_STMT_KEYWORDS = ("SELECT", "WITH", "INSERT", "UPDATE", "DELETE")


def _leads_with_keyword(line: str) -> bool:
    stripped = line.strip()
    if not stripped:
        return False
    first = stripped.split(None, 1)[0].lstrip("(").upper()
    return first in _STMT_KEYWORDS


def _scan_statements(text: str) -> list[str]:
    """Collect statements starting at keyword-leading lines. A statement
    runs until a line ending in ';' (inclusive) or end of text."""
    stmts: list[str] = []
    current: list[str] | None = None
    for line in text.splitlines():
        if current is None:
            if _leads_with_keyword(line):
                current = [line]
                if line.strip().endswith(";"):
                    stmts.append("\n".join(current).strip())
                    current = None
        else:
            current.append(line)
            if line.strip().endswith(";"):
                stmts.append("\n".join(current).strip())
                current = None
    if current:
        stmt = "\n".join(current).strip()
        if stmt:
            stmts.append(stmt)
    return stmts


def extract_sql(response: str) -> list[str]:
    """Pull SQL statements out of free-form model output.

    Statements in fenced code blocks win; when there are none, the same
    leading-keyword scan (SELECT/WITH/INSERT/UPDATE/DELETE) runs over the
    whole response. Extraction is idempotent over its own output.
    """
    found: list[str] = []
    for m in _FENCE_RE.finditer(response):
        body = m.group(1)
        scanned = _scan_statements(body)
        if scanned:
            found.extend(scanned)
        elif body.strip():
            # A fenced block is explicitly marked as code; keep it even
            # when malformed (repair loops feed broken SQL back around).
            found.append(body.strip())
    if found:
        return found
    return _scan_statements(response)


_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL | re.IGNORECASE)


def split_reasoning(response: str) -> tuple[str, str]:
    """Split a response into (thinking, answer) when the model marks the
    boundary with <think>...</think>; otherwise thinking is empty."""
    m = _THINK_RE.search(response)
    if not m:
        return "", response
    thinking = m.group(1).strip()
    answer = (response[: m.start()] + response[m.end():]).strip()
    return thinking, answer


@dataclass
class TranscriptEntry:
    agent: str
    messages: list[ChatMessage]
    response: str


@dataclass
class Transcript:
    """Append-only log of every prompt/response pair in a session."""

    entries: list[TranscriptEntry] = field(default_factory=list)

    def record(self, agent: str, messages: Sequence[ChatMessage], response: str) -> None:
        self.entries.append(TranscriptEntry(agent, list(messages), response))

    def to_jsonable(self) -> list[dict]:
        return [
            {
                "agent": e.agent,
                "messages": [{"role": m.role, "content": m.content} for m in e.messages],
                "response": e.response,
            }
            for e in self.entries
        ]


@dataclass
class LlmHandle:
    """A provider bound to one agent role: config, naming and transcript
    logging in one place."""

    provider: Provider
    config: ProviderConfig
    agent: str = "agent"
    transcript: Optional[Transcript] = None

    def ask(self, messages: Sequence[ChatMessage]) -> str:
        response = self.provider.complete(messages, self.config)
        if self.transcript is not None:
            self.transcript.record(self.agent, messages, response)
        return response

    def ask_text(self, system: str, user: str) -> str:
        return self.ask(
            [ChatMessage("system", system), ChatMessage("user", user)]
        )
