import sys
import time

import pytest

from quite.core import SqlQuery
from quite.corrector import (
    AlwaysUnknown,
    EquivalenceVerdict,
    RepairFailed,
    SqlCorrector,
    SubprocessVerifier,
    SyntaxReport,
    VerdictStage,
    VerdictStatus,
    local_syntax_check,
)
from quite.db.base import results_equal
from quite.llm import ScriptEntry
from tests.conftest import make_handle

Q = SqlQuery


class EqVerifier(AlwaysUnknown):
    name = "always-eq"

    def check(self, q_orig, q_rewr, schema_ddl):
        return EquivalenceVerdict(VerdictStatus.EQUIVALENT, VerdictStage.TOOL, "proved")


class NeqVerifier(AlwaysUnknown):
    name = "always-neq"

    def check(self, q_orig, q_rewr, schema_ddl):
        return EquivalenceVerdict(VerdictStatus.NONEQUIVALENT, VerdictStage.TOOL, "counterexample")


class TestCheckSyntax:
    def test_valid_query_ok(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        assert c.check_syntax(Q("SELECT 1")).ok

    def test_invalid_query_carries_server_message(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        report = c.check_syntax(Q("SELEC 1"))
        assert not report.ok
        assert "syntax error" in report.server_message

    def test_offline_grammar_violation(self):
        c = SqlCorrector(db=None)
        report = c.check_syntax(Q("SELECT FROM"))
        assert not report.ok
        assert "syntax error" in report.server_message

    def test_offline_missing_table_still_parses(self):
        assert local_syntax_check("SELECT a FROM table_that_does_not_exist").ok

    def test_failed_report_requires_message(self):
        with pytest.raises(ValueError):
            SyntaxReport(ok=False)


class TestRepairSyntax:
    def test_scripted_fix_in_one_attempt(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        llm = make_handle(["```sql\nSELECT 1\n```"])
        fixed = c.repair_syntax(Q("SELEC 1"), llm)
        assert fixed.text == "SELECT 1"

    def test_error_message_fed_to_llm(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        llm = make_handle(
            [ScriptEntry(response="```sql\nSELECT 1\n```", match="SELEC")]
        )
        assert c.repair_syntax(Q("SELEC 1"), llm).text == "SELECT 1"

    def test_budget_exhaustion(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        llm = make_handle(["```sql\nSELEC 2\n```", "```sql\nSELEC 3\n```"])
        with pytest.raises(RepairFailed) as exc:
            c.repair_syntax(Q("SELEC 1"), llm, k_max=2)
        assert exc.value.attempts_used == 2
        assert [a.text for a in exc.value.attempts] == ["SELEC 2", "SELEC 3"]

    def test_valid_input_violates_precondition(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        with pytest.raises(ValueError):
            c.repair_syntax(Q("SELECT 1"), make_handle([]))

    def test_result_always_passes_check(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        llm = make_handle(["no sql at all", "```sql\nSTILL BAD(\n```", "```sql\nSELECT 42\n```"])
        fixed = c.repair_syntax(Q("SELEC 1"), llm, k_max=3)
        assert c.check_syntax(fixed).ok


class TestVerifyEquivalence:
    def test_tool_equivalent_short_circuits(self, seeded_db):
        c = SqlCorrector(db=seeded_db, verifier=EqVerifier())
        q, v = c.verify_equivalence(Q("SELECT 1"), Q("SELECT 1 WHERE 1=1"), make_handle([]))
        assert q.text == "SELECT 1 WHERE 1=1"
        assert v.status is VerdictStatus.EQUIVALENT and v.stage is VerdictStage.TOOL

    def test_llm_confirms_after_refinement(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        llm = make_handle(
            [
                "NOT EQUIVALENT: constant differs\n```sql\nSELECT count(*) FROM prod\n```",
                "EQUIVALENT: both count prod rows",
            ]
        )
        q, v = c.verify_equivalence(
            Q("SELECT count(*) FROM prod"), Q("SELECT count(*) + 1 FROM prod"), llm
        )
        assert q.text == "SELECT count(*) FROM prod"
        assert v.status is VerdictStatus.EQUIVALENT and v.stage is VerdictStage.LLM

    def test_zero_budget_falls_back_to_original(self, seeded_db):
        c = SqlCorrector(db=seeded_db)
        orig = Q("SELECT 1")
        q, v = c.verify_equivalence(orig, Q("SELECT 2"), make_handle([]), budget_seconds=0.0)
        assert q is orig
        assert v.status is VerdictStatus.UNKNOWN

    def test_iteration_cap_bounds_llm_calls(self, seeded_db):
        c = SqlCorrector(db=seeded_db, iteration_cap=2)
        llm = make_handle(["NOT EQUIVALENT", "NOT EQUIVALENT", "EQUIVALENT (never reached)"])
        q, v = c.verify_equivalence(Q("SELECT 1"), Q("SELECT 2"), llm)
        assert q.text == "SELECT 1"
        assert llm.provider.remaining == 1

    def test_oracle_overrides_false_llm_claim(self, seeded_db):
        c = SqlCorrector(db=seeded_db, oracle_db=seeded_db)
        llm = make_handle(["EQUIVALENT (it is not)"])
        orig = Q("SELECT count(*) FROM prod")
        q, v = c.verify_equivalence(orig, Q("SELECT count(*) + 1 FROM prod"), llm)
        assert q is orig
        assert v.status is VerdictStatus.NONEQUIVALENT and v.stage is VerdictStage.ORACLE

    def test_oracle_confirms_true_llm_claim(self, seeded_db):
        c = SqlCorrector(db=seeded_db, oracle_db=seeded_db)
        llm = make_handle(["EQUIVALENT"])
        orig = Q("SELECT count(*) FROM prod")
        rewr = Q("SELECT count(*) FROM prod WHERE 1=1")
        q, v = c.verify_equivalence(orig, rewr, llm)
        assert q is rewr
        assert v.stage is VerdictStage.LLM

    def test_nonequivalent_tool_verdict_goes_to_llm_stage(self, seeded_db):
        c = SqlCorrector(db=seeded_db, verifier=NeqVerifier())
        llm = make_handle(
            ["NOT EQUIVALENT\n```sql\nSELECT count(*) FROM prod\n```", "EQUIVALENT"]
        )
        q, v = c.verify_equivalence(
            Q("SELECT count(*) FROM prod"), Q("SELECT count(*) - 1 FROM prod"), llm
        )
        assert q.text == "SELECT count(*) FROM prod"
        assert v.stage is VerdictStage.LLM

    def test_safety_on_seeded_instance(self, seeded_db):
        """Adversarial LLM always claims equivalence; the returned query is
        either oracle-equal or byte-identical to the original."""
        c = SqlCorrector(db=seeded_db, oracle_db=seeded_db)
        orig = Q("SELECT sum(amount) FROM sale WHERE quantity BETWEEN 1 AND 8")
        candidates = [
            Q("SELECT sum(amount) FROM sale WHERE quantity BETWEEN 1 AND 9"),  # not equivalent
            Q("SELECT sum(amount) FROM sale WHERE quantity >= 1 AND quantity <= 8"),  # equivalent
            Q("SELECT max(amount) FROM sale WHERE quantity BETWEEN 1 AND 8"),  # not equivalent
        ]
        for cand in candidates:
            llm = make_handle(["EQUIVALENT"])
            q, _ = c.verify_equivalence(orig, cand, llm)
            assert q.text == orig.text or results_equal(seeded_db, orig, q)

    def test_terminates_within_budget(self, seeded_db):
        c = SqlCorrector(db=seeded_db, iteration_cap=50)
        llm = make_handle(["NOT EQUIVALENT"] * 50)
        start = time.monotonic()
        c.verify_equivalence(Q("SELECT 1"), Q("SELECT 2"), llm, budget_seconds=0.3)
        assert time.monotonic() - start < 5.0


class TestSubprocessVerifier:
    def make_script(self, tmp_path, stdout_line: str):
        script = tmp_path / "verifier.py"
        script.write_text(
            "import sys\n"
            "orig, rewr, schema = sys.argv[1:4]\n"
            "print('diagnostics...')\n"
            f"print({stdout_line!r})\n"
        )
        return SubprocessVerifier([sys.executable, str(script)])

    @pytest.mark.parametrize(
        "token,status",
        [
            ("EQ", VerdictStatus.EQUIVALENT),
            ("NEQ", VerdictStatus.NONEQUIVALENT),
            ("UNKNOWN", VerdictStatus.UNKNOWN),
        ],
    )
    def test_last_line_protocol(self, tmp_path, token, status):
        v = self.make_script(tmp_path, token)
        verdict = v.check(Q("SELECT 1"), Q("SELECT 1"), "CREATE TABLE t (a int);")
        assert verdict.status is status
        assert verdict.stage is VerdictStage.TOOL

    def test_receives_three_files(self, tmp_path):
        script = tmp_path / "verifier.py"
        script.write_text(
            "import sys, pathlib\n"
            "paths = [pathlib.Path(p) for p in sys.argv[1:4]]\n"
            "assert paths[0].read_text() == 'SELECT 1'\n"
            "assert paths[1].read_text() == 'SELECT 2'\n"
            "assert 'CREATE TABLE' in paths[2].read_text()\n"
            "print('EQ')\n"
        )
        v = SubprocessVerifier([sys.executable, str(script)])
        verdict = v.check(Q("SELECT 1"), Q("SELECT 2"), "CREATE TABLE t (a int);")
        assert verdict.status is VerdictStatus.EQUIVALENT

    def test_broken_command_yields_unknown(self):
        v = SubprocessVerifier(["/nonexistent/binary"])
        verdict = v.check(Q("SELECT 1"), Q("SELECT 1"), "")
        assert verdict.status is VerdictStatus.UNKNOWN
