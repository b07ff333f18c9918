"""Command-line surface: rewrite, bench, kb build/query, hints analyze.

Exit codes: 0 success (including a safe fallback to the original query),
1 database connection failure, 2 invalid input/usage.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from quite import bench as bench_mod
from quite import fixtures, hints, kb, pipeline
from quite.config import QuiteConfig, resolve_config, resolve_dsn
from quite.core import SqlQuery
from quite.db.base import ConnectionFailed, Database, DbError, connect, referenced_tables
from quite.llm import HttpChatProvider, Provider, ScriptedProvider, Transcript

log = logging.getLogger(__name__)


def _fail_usage(message: str) -> None:
    raise click.UsageError(message)  # click exits with status 2


def _open_db(dsn: Optional[str]) -> Database:
    if not dsn:
        _fail_usage("no DSN given: pass --dsn or set QUITE_DSN")
    try:
        return connect(dsn)
    except ConnectionFailed as exc:
        click.echo(f"error: cannot connect: {exc}", err=True)
        sys.exit(1)
    except ValueError as exc:
        _fail_usage(str(exc))
    raise AssertionError("unreachable")


def _build_provider(mode: str, script: Optional[str], config: QuiteConfig) -> Provider:
    if mode == "mock":
        if not script:
            _fail_usage("--mode mock requires --script")
        return ScriptedProvider.from_json(script)
    if mode == "live":
        return HttpChatProvider()
    _fail_usage(f"unknown mode {mode!r}")
    raise AssertionError("unreachable")


def _load_corpus(path: Optional[str]) -> kb.Corpus:
    if path:
        return kb.Corpus.load(path)
    from importlib import resources

    packaged = resources.files("quite.data").joinpath("corpus.jsonl")
    with resources.as_file(packaged) as p:
        return kb.Corpus.load(p)


def _load_query(sql: Optional[str], sql_file: Optional[str]) -> SqlQuery:
    if sql and sql_file:
        _fail_usage("pass --query or --sql, not both")
    if sql_file:
        text = Path(sql_file).read_text(encoding="utf-8").strip()
    elif sql:
        text = sql.strip()
    else:
        _fail_usage("no query given: pass --sql FILE or --query TEXT")
    if not text:
        _fail_usage("query is empty")
    return SqlQuery(text)


@click.group()
@click.option("--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool) -> None:
    """Rewrite SQL queries into faster equivalent forms and inject
    optimizer hints, driven by LLM agents with database feedback."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--sql", "sql_file", type=click.Path(exists=True, dir_okay=False), help="File with the query to rewrite.")
@click.option("--query", help="Query text to rewrite.")
@click.option("--dsn", help="Database DSN (or env QUITE_DSN).")
@click.option("--mode", type=click.Choice(["live", "mock"]), default="live", show_default=True)
@click.option("--script", type=click.Path(exists=True, dir_okay=False), help="Scripted responses for --mode mock.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="key = value config file.")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), help="Knowledge corpus (JSONL).")
@click.option("--no-hints", is_flag=True, help="Skip the hint-injection stage.")
@click.option("--oracle-gate/--no-oracle-gate", default=False, show_default=True, help="Gate rewrites with the execution oracle on the target database.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Write the final SQL here instead of stdout.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Write the structured report (JSON) here.")
def rewrite(
    sql_file: Optional[str],
    query: Optional[str],
    dsn: Optional[str],
    mode: str,
    script: Optional[str],
    config_file: Optional[str],
    corpus_path: Optional[str],
    no_hints: bool,
    oracle_gate: bool,
    out_path: Optional[str],
    report_path: Optional[str],
) -> None:
    """Rewrite one query and print the final SQL."""
    cfg = resolve_config(config_file)
    q0 = _load_query(query, sql_file)
    db = _open_db(resolve_dsn(dsn))
    try:
        provider = _build_provider(mode, script, cfg)
        transcript = Transcript()
        pipe = pipeline.RewritePipeline(
            db=db,
            corpus=_load_corpus(corpus_path),
            llms=pipeline.build_llm_handles(provider, cfg, transcript),
            config=cfg,
            oracle_db=db if oracle_gate else None,
            transcript=transcript,
        )
        outcome, trace, hint_set = pipe.rewrite(q0, inject_hints=not no_hints)
        final_text = outcome.final_sql.text
        if out_path:
            Path(out_path).write_text(final_text + "\n", encoding="utf-8")
        else:
            click.echo(final_text)
        if report_path:
            doc = pipeline.report_document(outcome, trace, hint_set, transcript)
            Path(report_path).write_text(json.dumps(doc, indent=2), encoding="utf-8")
        if pipeline.is_fallback(outcome):
            click.echo("note: returned the original query (safe fallback)", err=True)
    except ConnectionFailed as exc:
        click.echo(f"error: connection failed: {exc}", err=True)
        sys.exit(1)
    finally:
        db.close()


@main.command()
@click.argument("workload_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--dsn", help="Database DSN (or env QUITE_DSN).")
@click.option("--mode", type=click.Choice(["live", "mock"]), default="live", show_default=True)
@click.option("--script", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--no-hints", is_flag=True)
@click.option("--seed-desk", is_flag=True, help="Seed the desk-scale schema before running.")
@click.option("--out", "csv_path", type=click.Path(dir_okay=False), help="Per-query CSV output path.")
def bench(
    workload_dir: str,
    dsn: Optional[str],
    mode: str,
    script: Optional[str],
    config_file: Optional[str],
    corpus_path: Optional[str],
    no_hints: bool,
    seed_desk: bool,
    csv_path: Optional[str],
) -> None:
    """Measure a workload directory of .sql files: rewrite each query,
    check equivalence by execution output, and report latency metrics."""
    cfg = resolve_config(config_file)
    sql_files = sorted(Path(workload_dir).glob("*.sql"))
    if not sql_files:
        _fail_usage(f"no .sql files in {workload_dir}")
    workload = [
        (p.stem, SqlQuery(p.read_text(encoding="utf-8").strip())) for p in sql_files
    ]
    db = _open_db(resolve_dsn(dsn))
    try:
        if seed_desk:
            fixtures.seed_desk_schema(db)
        provider = _build_provider(mode, script, cfg)
        pipe = pipeline.RewritePipeline(
            db=db,
            corpus=_load_corpus(corpus_path),
            llms=pipeline.build_llm_handles(provider, cfg),
            config=cfg,
            oracle_db=db,
        )

        def rewriter(q: SqlQuery) -> SqlQuery:
            return pipe.rewrite_text(q, inject_hints=not no_hints)

        records = bench_mod.run_bench(
            workload,
            db,
            rewriter,
            warmups=cfg.warmups,
            runs=cfg.runs,
            cap=cfg.latency_cap_seconds,
            improvement_threshold=cfg.improvement_threshold,
            on_error=lambda qid, exc: click.echo(f"warn: {qid}: {exc}", err=True),
        )
        if csv_path:
            bench_mod.write_csv(records, csv_path)
        summary = bench_mod.summarize(records)
        click.echo(
            f"queries: {len(records)}  equivalence_rate: {summary.equivalence_rate:.3f}  "
            f"improvement_rate: {summary.improvement_rate:.3f}"
        )
        click.echo(
            f"original  mean {summary.orig_mean:.4f}s median {summary.orig_median:.4f}s "
            f"p75 {summary.orig_p75:.4f}s p95 {summary.orig_p95:.4f}s"
        )
        click.echo(
            f"rewritten mean {summary.rw_mean:.4f}s median {summary.rw_median:.4f}s "
            f"p75 {summary.rw_p75:.4f}s p95 {summary.rw_p95:.4f}s"
        )
    except ConnectionFailed as exc:
        click.echo(f"error: connection failed: {exc}", err=True)
        sys.exit(1)
    finally:
        db.close()


@main.group(name="kb")
def kb_group() -> None:
    """Knowledge-base tooling."""


@kb_group.command(name="build")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of raw Q&A unit files (.json/.jsonl).")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Corpus output (JSONL).")
@click.option("--docs-points", type=click.Path(exists=True, dir_okay=False), help="Documentation points file (JSONL: {id, text}) for enhancement.")
@click.option("--mode", type=click.Choice(["offline", "mock", "live"]), default="offline", show_default=True, help="offline = heuristics only.")
@click.option("--script", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False))
def kb_build(
    in_dir: str,
    out_path: str,
    docs_points: Optional[str],
    mode: str,
    script: Optional[str],
    config_file: Optional[str],
) -> None:
    """Ingest raw units, filter, classify (and optionally enhance), then
    write the corpus file."""
    cfg = resolve_config(config_file)
    llm = None
    if mode != "offline":
        provider = _build_provider(mode, script, cfg)
        llm = pipeline.build_llm_handles(provider, cfg)["decision"]

    units: list[dict] = []
    for path in sorted(Path(in_dir).glob("*.json*")):
        units.extend(kb.load_raw_units(path))
    candidates = kb.ingest(units)
    outcome = kb.filter_entries(candidates, llm)
    click.echo(f"ingested {len(candidates)} candidates, kept {len(outcome.kept)}, dropped {len(outcome.dropped)}")

    entries = []
    points: list[kb.DocPoint] = []
    embedder = kb.HashedBagEmbedder()
    if docs_points:
        raw_points = [json.loads(line) for line in Path(docs_points).read_text(encoding="utf-8").splitlines() if line.strip()]
        points = kb.index_doc_points([(p["id"], p["text"]) for p in raw_points], embedder)
    import dataclasses

    for entry in outcome.kept:
        category = kb.classify(entry, llm)
        entry = dataclasses.replace(entry, category=category)
        if points:
            entry = kb.enhance(entry, points, embedder, llm)
        entries.append(entry)
    kb.Corpus(entries=entries).save(out_path)
    click.echo(f"wrote {len(entries)} entries to {out_path}")


@kb_group.command(name="query")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), help="Corpus file; defaults to the packaged fixture corpus.")
@click.option("--query", required=True, help="Retrieval query text.")
@click.option("--category", type=click.Choice([c.value for c in kb.Category]))
@click.option("-k", "top_k", default=3, show_default=True)
def kb_query(corpus_path: Optional[str], query: str, category: Optional[str], top_k: int) -> None:
    """Retrieve the top-k knowledge entries for a query."""
    corpus = _load_corpus(corpus_path)
    cat = kb.Category(category) if category else None
    for entry, score in kb.retrieve(corpus, query, category=cat, k=top_k):
        click.echo(f"{score:8.4f}  {entry.id}  [{entry.category.value}]  {entry.text_que[:70]}")


@main.group(name="hints")
def hints_group() -> None:
    """Hint analysis tooling."""


@hints_group.command(name="analyze")
@click.option("--sql", "sql_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--query", help="Query text.")
@click.option("--dsn", help="Database DSN (or env QUITE_DSN).")
@click.option("--mode", type=click.Choice(["offline", "mock", "live"]), default="offline", show_default=True)
@click.option("--script", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False))
def hints_analyze(
    sql_file: Optional[str],
    query: Optional[str],
    dsn: Optional[str],
    mode: str,
    script: Optional[str],
    config_file: Optional[str],
) -> None:
    """Analyze a query's plan and print hint suggestions."""
    cfg = resolve_config(config_file)
    q = _load_query(query, sql_file)
    db = _open_db(resolve_dsn(dsn))
    try:
        llm = None
        if mode != "offline":
            provider = _build_provider(mode, script, cfg)
            llm = pipeline.build_llm_handles(provider, cfg)["hints"]
        try:
            plan, _ = db.explain(q)
            stats = db.snapshot_stats(referenced_tables(q.text))
        except DbError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        suggestions = hints.analyze_plan(
            plan, stats, llm=llm, small_cte_rows=cfg.no_materialize_rows_threshold
        )
        if not suggestions:
            click.echo("no hint suggestions")
            return
        for s in suggestions:
            click.echo(f"{s.hint.render():40s}  {s.issue}")
        selected = hints.select_hints(suggestions, q, db)
        if selected:
            click.echo("selected set:")
            click.echo(hints.render(selected))
    except ConnectionFailed as exc:
        click.echo(f"error: connection failed: {exc}", err=True)
        sys.exit(1)
    finally:
        db.close()


if __name__ == "__main__":
    main()
