"""Hybrid SQL corrector: syntax repair plus two-stage equivalence
verification with a guaranteed safe fallback.

Stage 1 hands the query pair to an external verification tool (sound when
it answers, free to say unknown; the default always says unknown). Stage 2
is an iterative LLM compare-and-refine loop under a wall-clock budget and
an iteration cap. Whatever happens, the caller gets back a query that is
either verified or byte-identical to the original — never an unvetted
rewrite. When a seeded oracle database is configured, execution-output
comparison gates every acceptance and overrides optimistic LLM claims.
"""

from __future__ import annotations

import enum
import sqlite3
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from quite.core import SqlQuery
from quite.db.base import (
    ConnectionFailed,
    Database,
    SyntaxRejected,
    compare_results,
    referenced_tables,
)
from quite.llm import LlmHandle, extract_sql

DEFAULT_K_MAX = 3
DEFAULT_BUDGET_SECONDS = 60.0
DEFAULT_ITERATION_CAP = 5

_LOCAL_SYNTAX_MARKERS = ("syntax error", "incomplete input", "unrecognized token")


@dataclass(frozen=True)
class SyntaxReport:
    ok: bool
    server_message: Optional[str] = None
    attempts_used: int = 0

    def __post_init__(self) -> None:
        if not self.ok and not self.server_message:
            raise ValueError("failed syntax checks must carry the server message")


class VerdictStatus(str, enum.Enum):
    EQUIVALENT = "equivalent"
    NONEQUIVALENT = "nonequivalent"
    UNKNOWN = "unknown"


class VerdictStage(str, enum.Enum):
    TOOL = "tool"
    LLM = "llm"
    ORACLE = "oracle"


@dataclass(frozen=True)
class EquivalenceVerdict:
    status: VerdictStatus
    stage: VerdictStage
    evidence: str = ""


class ExternalVerifier:
    """Interface to an algebraic equivalence prover.

    Implementations must be sound when answering equivalent/nonequivalent
    and may answer unknown freely.
    """

    name = "verifier"

    def check(self, q_orig: SqlQuery, q_rewr: SqlQuery, schema_ddl: str) -> EquivalenceVerdict:
        raise NotImplementedError


class AlwaysUnknown(ExternalVerifier):
    """Default verifier: defers every pair to the LLM stage."""

    name = "always-unknown"

    def check(self, q_orig: SqlQuery, q_rewr: SqlQuery, schema_ddl: str) -> EquivalenceVerdict:
        return EquivalenceVerdict(VerdictStatus.UNKNOWN, VerdictStage.TOOL, "no tool configured")


class SubprocessVerifier(ExternalVerifier):
    """Adapter for out-of-process verifiers.

    Contract: the command is invoked with three extra arguments (original
    SQL file, rewritten SQL file, schema DDL file) and must print EQ, NEQ
    or UNKNOWN as the last non-empty line of stdout.
    """

    def __init__(self, command: Sequence[str], timeout_seconds: float = 60.0, name: str = "subprocess"):
        self.command = list(command)
        self.timeout_seconds = timeout_seconds
        self.name = name

    def check(self, q_orig: SqlQuery, q_rewr: SqlQuery, schema_ddl: str) -> EquivalenceVerdict:
        with tempfile.TemporaryDirectory(prefix="quite-verify-") as tmp:
            orig_path = Path(tmp) / "original.sql"
            rewr_path = Path(tmp) / "rewritten.sql"
            schema_path = Path(tmp) / "schema.sql"
            orig_path.write_text(q_orig.text, encoding="utf-8")
            rewr_path.write_text(q_rewr.text, encoding="utf-8")
            schema_path.write_text(schema_ddl, encoding="utf-8")
            try:
                proc = subprocess.run(
                    self.command + [str(orig_path), str(rewr_path), str(schema_path)],
                    capture_output=True,
                    text=True,
                    timeout=self.timeout_seconds,
                )
            except (subprocess.TimeoutExpired, OSError) as exc:
                return EquivalenceVerdict(VerdictStatus.UNKNOWN, VerdictStage.TOOL, str(exc))
        lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
        token = lines[-1].upper() if lines else ""
        mapping = {
            "EQ": VerdictStatus.EQUIVALENT,
            "NEQ": VerdictStatus.NONEQUIVALENT,
            "UNKNOWN": VerdictStatus.UNKNOWN,
        }
        status = mapping.get(token, VerdictStatus.UNKNOWN)
        return EquivalenceVerdict(status, VerdictStage.TOOL, f"{self.name}: {token or 'no output'}")


class RepairFailed(Exception):
    """All repair attempts still fail the syntax check."""

    def __init__(self, attempts: list[SqlQuery], attempts_used: int):
        super().__init__(f"syntax repair failed after {attempts_used} attempts")
        self.attempts = attempts
        self.attempts_used = attempts_used


def local_syntax_check(sql: str) -> SyntaxReport:
    """Offline grammar check via an in-memory SQLite prepare.

    Only genuine grammar violations fail; unknown tables/columns pass
    (structure is fine, the catalog just is not there). Dialect-specific
    constructs the local grammar lacks may fail spuriously; the server
    check is authoritative whenever a database is configured.
    """
    con = sqlite3.connect(":memory:")
    try:
        con.execute("EXPLAIN " + sql)
    except sqlite3.Error as exc:
        msg = str(exc)
        if any(marker in msg.lower() for marker in _LOCAL_SYNTAX_MARKERS):
            return SyntaxReport(ok=False, server_message=msg)
        return SyntaxReport(ok=True)
    finally:
        con.close()
    return SyntaxReport(ok=True)


_REPAIR_SYSTEM = "You fix SQL syntax errors. Reply with the corrected SQL in a fenced code block."
_REPAIR_USER = (
    "This SQL fails to parse.\n\nSQL:\n{query}\n\nServer error:\n{error}\n\n"
    "Fix the syntax without changing the query's meaning."
)

_EQUIV_SYSTEM = (
    "You verify whether two SQL queries are semantically equivalent on every "
    "valid database instance."
)
_EQUIV_USER = (
    "Original query:\n{original}\n\nRewrite candidate:\n{candidate}\n\n"
    "Compare them clause by clause. If they are equivalent, reply starting "
    "with the word EQUIVALENT. If not, reply starting with NOT EQUIVALENT and "
    "provide a corrected rewrite in a fenced code block."
)


class SqlCorrector:
    def __init__(
        self,
        db: Optional[Database] = None,
        verifier: Optional[ExternalVerifier] = None,
        oracle_db: Optional[Database] = None,
        k_max: int = DEFAULT_K_MAX,
        budget_seconds: float = DEFAULT_BUDGET_SECONDS,
        iteration_cap: int = DEFAULT_ITERATION_CAP,
    ):
        self.db = db
        self.verifier = verifier or AlwaysUnknown()
        self.oracle_db = oracle_db
        self.k_max = k_max
        self.budget_seconds = budget_seconds
        self.iteration_cap = iteration_cap

    # -- syntax ------------------------------------------------------------

    def check_syntax(self, q: SqlQuery) -> SyntaxReport:
        """ok=True iff the server EXPLAIN-parses the query (local grammar
        fallback when no database is configured). Connection loss raises
        rather than reporting a syntax failure."""
        if self.db is None:
            return local_syntax_check(q.text)
        try:
            self.db.explain(q)
        except SyntaxRejected as exc:
            return SyntaxReport(ok=False, server_message=exc.server_message)
        except ConnectionFailed:
            raise
        return SyntaxReport(ok=True)

    def repair_syntax(self, q: SqlQuery, llm: LlmHandle, k_max: Optional[int] = None) -> SqlQuery:
        """Iteratively prompt the LLM with the query and the verbatim server
        error until a variant parses; after k_max failures raise RepairFailed
        carrying every attempted variant."""
        k_max = k_max if k_max is not None else self.k_max
        report = self.check_syntax(q)
        if report.ok:
            raise ValueError("repair_syntax requires a query that fails check_syntax")
        error_message = report.server_message or ""
        current = q
        attempts: list[SqlQuery] = []
        for _ in range(k_max):
            reply = llm.ask_text(
                _REPAIR_SYSTEM,
                _REPAIR_USER.format(query=current.text, error=error_message),
            )
            statements = extract_sql(reply)
            if not statements:
                continue
            candidate = SqlQuery(statements[0], dialect=q.dialect)
            attempts.append(candidate)
            verdict = self.check_syntax(candidate)
            if verdict.ok:
                return candidate
            current = candidate
            error_message = verdict.server_message or error_message
        raise RepairFailed(attempts, attempts_used=k_max)

    # -- equivalence ---------------------------------------------------------

    def verify_equivalence(
        self,
        q_orig: SqlQuery,
        q_rewr: SqlQuery,
        llm: LlmHandle,
        budget_seconds: Optional[float] = None,
        iteration_cap: Optional[int] = None,
    ) -> tuple[SqlQuery, EquivalenceVerdict]:
        """Two-stage check; every path returns a safe query.

        Tool says equivalent -> accept at stage tool. Otherwise the LLM
        loop compares and refines until it asserts equivalence or the
        budget (wall clock or iterations) runs out, in which case the
        original query is returned. The execution oracle, when configured,
        gets the last word on any accepted rewrite.
        """
        budget = self.budget_seconds if budget_seconds is None else budget_seconds
        cap = self.iteration_cap if iteration_cap is None else iteration_cap

        schema_ddl = ""
        if self.db is not None:
            tables = referenced_tables(q_orig.text + "\n" + q_rewr.text)
            try:
                schema_ddl = self.db.ddl_for(tables)
            except Exception:
                schema_ddl = ""

        accepted: Optional[tuple[SqlQuery, EquivalenceVerdict]] = None
        tool_verdict = self.verifier.check(q_orig, q_rewr, schema_ddl)
        if tool_verdict.status is VerdictStatus.EQUIVALENT:
            accepted = (q_rewr, tool_verdict)
        else:
            accepted = self._llm_loop(q_orig, q_rewr, llm, budget, cap)

        if accepted is None:
            return q_orig, EquivalenceVerdict(
                VerdictStatus.UNKNOWN, VerdictStage.LLM, "budget exhausted"
            )

        candidate, verdict = accepted
        if self.oracle_db is not None and not candidate.same_as(q_orig):
            cmp = compare_results(self.oracle_db, q_orig, candidate)
            if not cmp.equal:
                return q_orig, EquivalenceVerdict(
                    VerdictStatus.NONEQUIVALENT, VerdictStage.ORACLE, cmp.reason
                )
        return candidate, verdict

    def _llm_loop(
        self,
        q_orig: SqlQuery,
        q_rewr: SqlQuery,
        llm: LlmHandle,
        budget_seconds: float,
        iteration_cap: int,
    ) -> Optional[tuple[SqlQuery, EquivalenceVerdict]]:
        deadline = time.monotonic() + budget_seconds
        candidate = q_rewr
        iterations = 0
        while time.monotonic() < deadline and iterations < iteration_cap:
            iterations += 1
            reply = llm.ask_text(
                _EQUIV_SYSTEM,
                _EQUIV_USER.format(original=q_orig.text, candidate=candidate.text),
            )
            if self._asserts_equivalent(reply):
                return candidate, EquivalenceVerdict(
                    VerdictStatus.EQUIVALENT,
                    VerdictStage.LLM,
                    f"LLM asserted equivalence after {iterations} iteration(s)",
                )
            refined = self._first_valid_statement(reply, candidate)
            if refined is not None:
                candidate = refined
        return None

    @staticmethod
    def _asserts_equivalent(reply: str) -> bool:
        upper = reply.upper()
        negative = ("NOT EQUIVALENT", "NON-EQUIVALENT", "NONEQUIVALENT", "NOT-EQUIVALENT")
        if any(tok in upper for tok in negative):
            return False
        return "EQUIVALENT" in upper

    def _first_valid_statement(self, reply: str, current: SqlQuery) -> Optional[SqlQuery]:
        for stmt in extract_sql(reply):
            try:
                candidate = SqlQuery(stmt, dialect=current.dialect)
            except ValueError:
                continue
            if candidate.same_as(current):
                continue
            try:
                if self.check_syntax(candidate).ok:
                    return candidate
            except ConnectionFailed:
                return None
        return None
