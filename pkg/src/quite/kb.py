"""Structured rewrite-knowledge base.

Entries are question/answer pairs (each side has a prose half and a SQL
half) organized into four categories. The offline pipeline ingests raw Q&A
units from local corpus files, filters untrustworthy content, optionally
enriches answers with documentation points, and classifies entries; the
online path is BM25 retrieval over question text + SQL identifiers.
Persistence is JSON lines, one entry per line, schema versioned.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from quite.llm import LlmHandle

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

BM25_K1 = 1.2
BM25_B = 0.75

# Keywords dropped when tokenizing the SQL half, so retrieval keys on
# identifiers rather than on SELECT/FROM noise present in every entry.
SQL_STOPWORDS = frozenset(
    """select from where and or not null as on join inner left right full outer
    cross group by order having limit offset union all distinct insert into
    values update set delete with exists between like in is case when then else
    end asc desc""".split()
)


class Category(str, enum.Enum):
    JOIN_OPTIMIZATION = "join_optimization"
    CONSTANT_FOLDING = "constant_folding"
    PREDICATE_SIMPLIFICATION = "predicate_simplification"
    OTHER = "other"


class Provenance(str, enum.Enum):
    OFFICIAL_DOCS = "official_docs"
    COMMUNITY = "community"
    FIXTURE = "fixture"


@dataclass(frozen=True)
class Quality:
    likes: int = 0
    dislikes: int = 0
    consensus: bool = True


@dataclass(frozen=True)
class KbEntry:
    id: str
    text_que: str
    sql_que: str
    text_ans: str
    sql_ans: str
    category: Category = Category.OTHER
    provenance: Provenance = Provenance.COMMUNITY
    quality: Quality = Quality()
    summary: Optional[str] = None

    def __post_init__(self) -> None:
        for name in ("text_que", "sql_que", "text_ans", "sql_ans"):
            if not getattr(self, name).strip():
                raise ValueError(f"KbEntry.{name} must be non-empty")

    @property
    def unit_id(self) -> str:
        """Raw-unit identity; answers of one unit share the prefix."""
        return self.id.split("#", 1)[0]

    def to_json(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "id": self.id,
            "question": {"text_que": self.text_que, "sql_que": self.sql_que},
            "answer": {"text_ans": self.text_ans, "sql_ans": self.sql_ans},
            "category": self.category.value,
            "provenance": self.provenance.value,
            "quality": {
                "likes": self.quality.likes,
                "dislikes": self.quality.dislikes,
                "consensus": self.quality.consensus,
            },
            "summary": self.summary,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "KbEntry":
        if doc.get("v", 1) != SCHEMA_VERSION:
            raise MalformedUnit(f"unsupported schema version {doc.get('v')!r}")
        q = doc["question"]
        a = doc["answer"]
        quality = doc.get("quality", {})
        return cls(
            id=doc["id"],
            text_que=q["text_que"],
            sql_que=q["sql_que"],
            text_ans=a["text_ans"],
            sql_ans=a["sql_ans"],
            category=Category(doc.get("category", "other")),
            provenance=Provenance(doc.get("provenance", "community")),
            quality=Quality(
                likes=int(quality.get("likes", 0)),
                dislikes=int(quality.get("dislikes", 0)),
                consensus=bool(quality.get("consensus", True)),
            ),
            summary=doc.get("summary"),
        )


class MalformedUnit(Exception):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics (underscores kept, so SQL
    identifiers stay whole). No stemming."""
    return re.findall(r"\w+", text.lower())


def entry_terms(entry: KbEntry) -> list[str]:
    terms = tokenize(entry.text_que)
    terms.extend(t for t in tokenize(entry.sql_que) if t not in SQL_STOPWORDS)
    return terms


@dataclass
class Bm25Index:
    """Term statistics for BM25 scoring over a fixed document list."""

    doc_term_counts: list[Counter]
    doc_lengths: list[int]
    avg_doc_length: float
    doc_freq: Counter
    n_docs: int
    k1: float = BM25_K1
    b: float = BM25_B

    @classmethod
    def build(cls, term_lists: Sequence[Sequence[str]], k1: float = BM25_K1, b: float = BM25_B) -> "Bm25Index":
        counts = [Counter(terms) for terms in term_lists]
        lengths = [len(terms) for terms in term_lists]
        df = Counter()
        for c in counts:
            df.update(c.keys())
        n = len(term_lists)
        avg = (sum(lengths) / n) if n else 0.0
        return cls(
            doc_term_counts=counts,
            doc_lengths=lengths,
            avg_doc_length=avg,
            doc_freq=df,
            n_docs=n,
            k1=k1,
            b=b,
        )

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        if df == 0:
            return 0.0
        # Non-negative variant: log(1 + (N - df + 0.5)/(df + 0.5)).
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: Sequence[str], doc_index: int) -> float:
        counts = self.doc_term_counts[doc_index]
        if not counts or self.avg_doc_length == 0:
            return 0.0
        dl = self.doc_lengths[doc_index]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_length)
        total = 0.0
        for term in query_terms:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)
        return total


@dataclass
class Corpus:
    """Entries plus the BM25 index over them. The index is rebuilt on any
    mutation; loaded corpora are treated as immutable."""

    entries: list[KbEntry] = field(default_factory=list)
    k1: float = BM25_K1
    b: float = BM25_B
    index: Bm25Index = field(init=False)

    def __post_init__(self) -> None:
        self.rebuild_index()

    def rebuild_index(self) -> None:
        self.index = Bm25Index.build(
            [entry_terms(e) for e in self.entries], k1=self.k1, b=self.b
        )

    def add(self, entry: KbEntry) -> None:
        self.entries.append(entry)
        self.rebuild_index()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, k1: float = BM25_K1, b: float = BM25_B) -> "Corpus":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(KbEntry.from_json(json.loads(line)))
        return cls(entries=entries, k1=k1, b=b)


def retrieve(
    corpus: Corpus,
    query: str,
    category: Optional[Category] = None,
    k: int = 3,
    drop_zero: bool = False,
) -> list[tuple[KbEntry, float]]:
    """Top-k entries by BM25 score, optionally restricted to one category.

    Ties (and the all-zero case when `drop_zero` is off) break on entry id,
    so rankings are stable across runs.
    """
    query_terms = tokenize(query)
    scored = []
    for i, entry in enumerate(corpus.entries):
        if category is not None and entry.category is not category:
            continue
        score = corpus.index.score(query_terms, i)
        if drop_zero and score <= 0.0:
            continue
        scored.append((entry, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0].id))
    return scored[: max(0, k)]


# -- offline pipeline: ingest / filter / enhance / classify ------------------


def ingest(raw_units: Iterable[dict]) -> list[KbEntry]:
    """Parse raw Q&A units into candidate entries.

    A unit must carry question text + SQL and at least one answer; units
    without answers, and malformed units, are skipped and logged. Each
    answer becomes one candidate entry (id = "<unit>#a<i>") so the filter
    step can vote among a unit's answers.
    """
    candidates: list[KbEntry] = []
    for n, unit in enumerate(raw_units):
        try:
            unit_id = str(unit.get("id") or f"unit{n}")
            question = unit["question"]
            answers = unit.get("answers", [])
            if not answers:
                raise MalformedUnit("unit has no answers")
            for i, ans in enumerate(answers):
                candidates.append(
                    KbEntry(
                        id=f"{unit_id}#a{i}",
                        text_que=question["text"],
                        sql_que=question["sql"],
                        text_ans=ans["text"],
                        sql_ans=ans["sql"],
                        category=Category(unit.get("category", "other")),
                        provenance=Provenance(unit.get("provenance", "community")),
                        quality=Quality(
                            likes=int(ans.get("likes", 0)),
                            dislikes=int(ans.get("dislikes", 0)),
                        ),
                    )
                )
        except (KeyError, TypeError, ValueError, MalformedUnit) as exc:
            log.warning("skipping malformed unit %s: %s", unit.get("id", n) if isinstance(unit, dict) else n, exc)
    return candidates


def load_raw_units(path: str | Path) -> list[dict]:
    """Read raw units from a .json (list) or .jsonl file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    doc = json.loads(text)
    return doc if isinstance(doc, list) else [doc]


@dataclass
class DropRecord:
    entry: KbEntry
    reason: str


@dataclass
class FilterOutcome:
    kept: list[KbEntry]
    dropped: list[DropRecord]


def filter_entries(candidates: Sequence[KbEntry], llm: Optional[LlmHandle]) -> FilterOutcome:
    """Filter untrustworthy candidates.

    Rules: an answer with more dislikes than likes is dropped; for units
    with several surviving answers an LLM consensus check gates the unit
    and three majority-vote calls pick the best answer. Provider failures
    abort only the affected unit.
    """
    kept: list[KbEntry] = []
    dropped: list[DropRecord] = []

    by_unit: dict[str, list[KbEntry]] = {}
    for cand in candidates:
        if cand.quality.dislikes > cand.quality.likes:
            dropped.append(DropRecord(cand, "more dislikes than likes"))
            continue
        by_unit.setdefault(cand.unit_id, []).append(cand)

    for unit_id, group in by_unit.items():
        if len(group) == 1:
            kept.append(replace(group[0], quality=replace(group[0].quality, consensus=True)))
            continue
        try:
            winner = _resolve_multi_answer(unit_id, group, llm, dropped)
        except Exception as exc:  # provider failure: drop the unit, keep going
            for cand in group:
                dropped.append(DropRecord(cand, f"provider error: {exc}"))
            continue
        if winner is not None:
            kept.append(winner)
    kept.sort(key=lambda e: e.id)
    return FilterOutcome(kept=kept, dropped=dropped)


def _resolve_multi_answer(
    unit_id: str,
    group: list[KbEntry],
    llm: Optional[LlmHandle],
    dropped: list[DropRecord],
) -> Optional[KbEntry]:
    group = sorted(group, key=lambda e: e.id)
    if llm is None:
        # Offline heuristic: highest like margin wins.
        winner = max(group, key=lambda e: (e.quality.likes - e.quality.dislikes, e.id))
        for cand in group:
            if cand is not winner:
                dropped.append(DropRecord(cand, "lost like-margin tiebreak (no LLM)"))
        return replace(winner, quality=replace(winner.quality, consensus=True))

    listing = "\n".join(
        f"[{i}] likes={e.quality.likes} dislikes={e.quality.dislikes}\n{e.text_ans}"
        for i, e in enumerate(group)
    )
    consensus_reply = llm.ask_text(
        "You review database Q&A discussions.",
        "Question:\n"
        + group[0].text_que
        + "\n\nAnswers:\n"
        + listing
        + "\n\nHas the discussion reached consensus on one approach? Reply YES or NO.",
    )
    if "YES" not in consensus_reply.upper():
        for cand in group:
            dropped.append(DropRecord(cand, "no consensus in discussion"))
        return None

    votes: Counter = Counter()
    for _ in range(3):
        reply = llm.ask_text(
            "You review database Q&A discussions.",
            "Pick the most effective answer. Reply with its number only.\n\n"
            + listing,
        )
        m = re.search(r"\d+", reply)
        if m and int(m.group(0)) < len(group):
            votes[int(m.group(0))] += 1
    if not votes:
        for cand in group:
            dropped.append(DropRecord(cand, "votes unparseable"))
        return None
    winner_idx = votes.most_common(1)[0][0]
    winner = group[winner_idx]
    for i, cand in enumerate(group):
        if i != winner_idx:
            dropped.append(DropRecord(cand, "lost majority vote"))
    return replace(winner, quality=replace(winner.quality, consensus=True))


# -- enhancement (doc-point retrieval by embedding similarity) ---------------


class Embedder:
    """Interface: text -> fixed-size vector."""

    def embed(self, text: str) -> list[float]:
        raise NotImplementedError


class HashedBagEmbedder(Embedder):
    """Deterministic stand-in for a sentence embedder: hashed bag-of-words
    buckets, L2-normalized. Good enough to make cosine retrieval testable
    offline; not a semantic model."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        for token in tokenize(text):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "big") % self.dim
            vec[bucket] += 1.0
        norm = math.sqrt(sum(x * x for x in vec))
        return [x / norm for x in vec] if norm else vec


@dataclass(frozen=True)
class DocPoint:
    id: str
    text: str
    embedding: tuple[float, ...]


def index_doc_points(texts: Sequence[tuple[str, str]], embedder: Embedder) -> list[DocPoint]:
    return [
        DocPoint(id=pid, text=text, embedding=tuple(embedder.embed(text)))
        for pid, text in texts
    ]


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        return 0.0
    return dot / (nu * nv)


def enhance(
    entry: KbEntry,
    docs_points: Sequence[DocPoint],
    embedder: Embedder,
    llm: Optional[LlmHandle],
) -> KbEntry:
    """Summarize the entry, retrieve the top-3 documentation points by
    cosine similarity, and append the points the LLM confirms as actually
    explaining the rewrite. Embedder failure returns the entry unenhanced
    (summary flagged)."""
    if llm is not None:
        summary = llm.ask_text(
            "You summarize database Q&A units.",
            f"Summarize the rewrite issue and its accepted solution in two sentences.\n\n"
            f"Question: {entry.text_que}\nAnswer: {entry.text_ans}",
        ).strip()
    else:
        summary = f"{entry.text_que.strip()} -> {entry.text_ans.strip()}"[:300]
    try:
        query_vec = embedder.embed(summary)
    except Exception as exc:
        log.warning("embedder failed for %s: %s", entry.id, exc)
        return replace(entry, summary=f"[unenhanced: embedder failure] {summary}")

    ranked = sorted(
        docs_points, key=lambda p: (-cosine(query_vec, p.embedding), p.id)
    )[:3]
    confirmed: list[DocPoint] = []
    for point in ranked:
        if llm is None:
            confirmed.append(point)
            continue
        reply = llm.ask_text(
            "You check whether documentation explains a SQL rewrite strategy.",
            f"Rewrite summary:\n{summary}\n\nDocumentation point:\n{point.text}\n\n"
            "Does this point effectively explain the rewrite strategy? Reply YES or NO.",
        )
        if "YES" in reply.upper():
            confirmed.append(point)
    if not confirmed:
        return replace(entry, summary=summary)
    appendix = "\n".join(f"[doc] {p.text}" for p in confirmed)
    return replace(entry, summary=summary, text_ans=entry.text_ans + "\n" + appendix)


# -- classification -----------------------------------------------------------

_JOIN_RE = re.compile(r"\bjoins?\b|\bjoin\s+order\b", re.IGNORECASE)
_CONST_RE = re.compile(
    r"\bconstant(\s+fold\w*)?\b|\bfold\w*\b|\d\s*[-+*/]\s*\d|\bprecompute", re.IGNORECASE
)
_PRED_RE = re.compile(
    r"\bpredicates?\b|\bwhere\b.*\b(simplif|redundant|remov|1\s*=\s*1)|\bsimplif\w+\b",
    re.IGNORECASE | re.DOTALL,
)

_CATEGORY_TOKENS = {
    "join_optimization": Category.JOIN_OPTIMIZATION,
    "constant_folding": Category.CONSTANT_FOLDING,
    "predicate_simplification": Category.PREDICATE_SIMPLIFICATION,
    "other": Category.OTHER,
}


def heuristic_classify(text: str) -> Category:
    if _JOIN_RE.search(text):
        return Category.JOIN_OPTIMIZATION
    if _CONST_RE.search(text):
        return Category.CONSTANT_FOLDING
    if _PRED_RE.search(text):
        return Category.PREDICATE_SIMPLIFICATION
    return Category.OTHER


def classify(entry: KbEntry, llm: Optional[LlmHandle] = None) -> Category:
    """Assign exactly one of the four categories. Without an LLM the
    keyword heuristic decides; an unparseable LLM answer falls back to
    `other`."""
    signal = f"{entry.text_que}\n{entry.text_ans}\n{entry.sql_que}\n{entry.sql_ans}"
    if llm is None:
        return heuristic_classify(signal)
    reply = llm.ask_text(
        "You classify SQL rewrite knowledge.",
        "Classify this rewrite into exactly one of: join_optimization, "
        "constant_folding, predicate_simplification, other. Reply with the "
        f"category name only.\n\n{signal}",
    )
    lowered = reply.lower()
    for token, category in _CATEGORY_TOKENS.items():
        if token in lowered:
            return category
    return Category.OTHER
