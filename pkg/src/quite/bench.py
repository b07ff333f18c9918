"""Benchmark harness: timed workload evaluation and the paper-style
metrics (equivalence rate, improvement rate, latency percentiles).

Protocol per query: warm-up run(s), then measured runs; the rewritten
query must produce the same execution output as the original or its
equivalence flag is False and it is charged the original's measured times.
A rewrite counts as improved only when it is equivalent and its mean
latency is at least 10% below the original's. Percentiles use the
nearest-rank method over per-query mean latencies.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from quite.core import SqlQuery
from quite.db.base import Database, DbError, TimedRun, results_equal

CSV_COLUMNS = ("query_id", "orig_mean_s", "rw_mean_s", "equivalent", "improved", "speedup")


def mean_latency(runs: Sequence[TimedRun]) -> float:
    if not runs:
        return 0.0
    return statistics.fmean(r.latency_seconds for r in runs)


@dataclass
class RunRecord:
    query_id: str
    original_latency: list[TimedRun]
    rewritten_latency: list[TimedRun]
    equivalent: bool
    improved: bool
    speedup: float

    @property
    def orig_mean(self) -> float:
        return mean_latency(self.original_latency)

    @property
    def rw_mean(self) -> float:
        return mean_latency(self.rewritten_latency)


@dataclass(frozen=True)
class BenchSummary:
    orig_mean: float
    orig_median: float
    orig_p75: float
    orig_p95: float
    rw_mean: float
    rw_median: float
    rw_p75: float
    rw_p95: float
    equivalence_rate: float
    improvement_rate: float


def nearest_rank_percentile(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if not values:
        return 0.0
    if not 0 < pct <= 100:
        raise ValueError("pct must be in (0, 100]")
    ordered = sorted(values)
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[max(0, rank - 1)]


def evaluate_query(
    query_id: str,
    original: SqlQuery,
    rewritten: SqlQuery,
    db: Database,
    warmups: int = 1,
    runs: int = 3,
    cap: float = 300.0,
    improvement_threshold: float = 0.10,
) -> RunRecord:
    """Measure one original/rewrite pair under the evaluation protocol."""
    orig_runs = db.timed_execute(original, warmups=warmups, runs=runs, cap=cap)

    if rewritten.text == original.text:
        # Identical rewrite: same statement, same measurements; by
        # definition no improvement.
        return RunRecord(
            query_id=query_id,
            original_latency=orig_runs,
            rewritten_latency=list(orig_runs),
            equivalent=True,
            improved=False,
            speedup=1.0,
        )

    try:
        equivalent = results_equal(db, original, rewritten, cap=cap)
    except DbError:
        equivalent = False
    if not equivalent:
        # Charge the rewritten side the original's execution time.
        return RunRecord(
            query_id=query_id,
            original_latency=orig_runs,
            rewritten_latency=list(orig_runs),
            equivalent=False,
            improved=False,
            speedup=1.0,
        )

    rw_runs = db.timed_execute(rewritten, warmups=warmups, runs=runs, cap=cap)
    orig_mean = mean_latency(orig_runs)
    rw_mean = mean_latency(rw_runs)
    improved = rw_mean <= (1.0 - improvement_threshold) * orig_mean
    speedup = orig_mean / rw_mean if rw_mean > 0 else float("inf")
    return RunRecord(
        query_id=query_id,
        original_latency=orig_runs,
        rewritten_latency=rw_runs,
        equivalent=True,
        improved=improved,
        speedup=speedup,
    )


def run_bench(
    workload: Sequence[tuple[str, SqlQuery]],
    db: Database,
    rewriter: Callable[[SqlQuery], SqlQuery],
    warmups: int = 1,
    runs: int = 3,
    cap: float = 300.0,
    improvement_threshold: float = 0.10,
    on_error: Optional[Callable[[str, Exception], None]] = None,
) -> list[RunRecord]:
    """Rewrite and measure every workload query; per-query failures are
    recorded (equivalent=False, charged times) and the harness continues."""
    records: list[RunRecord] = []
    for query_id, query in workload:
        try:
            rewritten = rewriter(query)
        except Exception as exc:  # rewrite failures must not kill the run
            if on_error:
                on_error(query_id, exc)
            rewritten = query
        try:
            records.append(
                evaluate_query(
                    query_id,
                    query,
                    rewritten,
                    db,
                    warmups=warmups,
                    runs=runs,
                    cap=cap,
                    improvement_threshold=improvement_threshold,
                )
            )
        except DbError as exc:
            if on_error:
                on_error(query_id, exc)
    return records


def summarize(records: Sequence[RunRecord]) -> BenchSummary:
    return _summarize_rows(
        [(r.orig_mean, r.rw_mean, r.equivalent, r.improved) for r in records]
    )


def _summarize_rows(rows: Sequence[tuple[float, float, bool, bool]]) -> BenchSummary:
    if not rows:
        return BenchSummary(0, 0, 0, 0, 0, 0, 0, 0, 0.0, 0.0)
    orig = [r[0] for r in rows]
    rw = [r[1] for r in rows]
    n = len(rows)
    return BenchSummary(
        orig_mean=statistics.fmean(orig),
        orig_median=nearest_rank_percentile(orig, 50),
        orig_p75=nearest_rank_percentile(orig, 75),
        orig_p95=nearest_rank_percentile(orig, 95),
        rw_mean=statistics.fmean(rw),
        rw_median=nearest_rank_percentile(rw, 50),
        rw_p75=nearest_rank_percentile(rw, 75),
        rw_p95=nearest_rank_percentile(rw, 95),
        equivalence_rate=sum(1 for r in rows if r[2]) / n,
        improvement_rate=sum(1 for r in rows if r[3]) / n,
    )


def write_csv(records: Sequence[RunRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.query_id,
                    repr(r.orig_mean),
                    repr(r.rw_mean),
                    int(r.equivalent),
                    int(r.improved),
                    repr(r.speedup),
                ]
            )


def summary_from_csv(path: str | Path) -> BenchSummary:
    rows: list[tuple[float, float, bool, bool]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(
                (
                    float(row["orig_mean_s"]),
                    float(row["rw_mean_s"]),
                    bool(int(row["equivalent"])),
                    bool(int(row["improved"])),
                )
            )
    return _summarize_rows(rows)
