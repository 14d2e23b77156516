"""BEIR-format dataset loaders, TREC run files, and the shared data model.

Documents, queries, qrels, and runs are the currency every other module
trades in. Loaders are pure functions over files; loaded objects are
treated as immutable.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


class FormatError(ValueError):
    """Malformed input data (corpus/queries/qrels/run files)."""


@dataclass(frozen=True)
class Document:
    """One corpus document. Title and body are stored verbatim."""

    id: str
    title: str
    body: str

    def __post_init__(self) -> None:
        if not self.id:
            raise FormatError("document id must be non-empty")
        if not isinstance(self.title, str) or not isinstance(self.body, str):
            raise FormatError(f"document {self.id!r}: title and body must be strings")

    def text(self) -> str:
        """Title and body joined for display/prompting; body alone if untitled."""
        return f"{self.title}\n{self.body}" if self.title else self.body


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise FormatError("query id must be non-empty")
        if not isinstance(self.text, str) or not self.text:
            raise FormatError(f"query {self.id!r}: text must be a non-empty string")


class QrelSet:
    """Graded relevance judgments: (query id, doc id) -> grade >= 0.

    Absent pairs mean "unjudged". Duplicate lines in the source file are
    resolved last-wins (see load_qrels).
    """

    def __init__(self, judgments: dict[str, dict[str, int]] | None = None) -> None:
        self.judgments: dict[str, dict[str, int]] = {}
        if judgments:
            for qid, docs in judgments.items():
                for did, grade in docs.items():
                    self.add(qid, did, grade)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise FormatError(
                f"qrels ({query_id}, {doc_id}): grade must be >= 0, got {grade}"
            )
        self.judgments.setdefault(query_id, {})[doc_id] = grade

    def grade(self, query_id: str, doc_id: str) -> int | None:
        """Grade for the pair, or None if unjudged."""
        return self.judgments.get(query_id, {}).get(doc_id)

    def query_ids(self) -> list[str]:
        return list(self.judgments)

    def __len__(self) -> int:
        return sum(len(docs) for docs in self.judgments.values())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, QrelSet) and self.judgments == other.judgments


def _sort_ranking(pairs: list[tuple[str, float]]) -> list[tuple[str, float]]:
    # Score descending, doc id ascending on ties: the one tie-break rule
    # used everywhere so rankings are reproducible.
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


@dataclass
class Run:
    """Per-query ranked lists of (doc id, score).

    Entries are normalized on construction: within each query, doc ids are
    unique, scores finite, and the list is sorted by score descending with
    ties broken by ascending doc id.
    """

    entries: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    tag: str = "run"

    def __post_init__(self) -> None:
        normalized = {}
        for qid, pairs in self.entries.items():
            pairs = [(did, float(score)) for did, score in pairs]
            seen = set()
            for did, score in pairs:
                if did in seen:
                    raise FormatError(f"run {self.tag!r}, query {qid}: duplicate doc id {did!r}")
                if not math.isfinite(score):
                    raise FormatError(f"run {self.tag!r}, query {qid}, doc {did}: non-finite score")
                seen.add(did)
            normalized[qid] = _sort_ranking(pairs)
        self.entries = normalized

    @classmethod
    def from_scores(cls, scores: dict[str, dict[str, float]], tag: str = "run") -> Run:
        """Build a run from {query id: {doc id: score}} mappings."""
        return cls({qid: list(docs.items()) for qid, docs in scores.items()}, tag=tag)

    def query_ids(self) -> list[str]:
        return list(self.entries)

    def doc_ids(self, query_id: str) -> list[str]:
        return [did for did, _ in self.entries.get(query_id, [])]


def load_corpus(path: str) -> list[Document]:
    """Load a BEIR corpus.jsonl: one {"_id", "title"?, "text"} object per line.

    Order-preserving and total on well-formed input; duplicate ids and
    malformed lines are errors (the error names the offending line).
    """
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = Document(id=str(obj["_id"]), title=obj.get("title", "") or "",
                               body=obj.get("text", ""))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed corpus line ({exc})") from exc
            if doc.id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate document id {doc.id!r}")
            seen.add(doc.id)
            docs.append(doc)
    return docs


def load_queries(path: str) -> list[Query]:
    """Load a BEIR queries.jsonl: one {"_id", "text"} object per line."""
    queries: list[Query] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                query = Query(id=str(obj["_id"]), text=obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError, FormatError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed query line ({exc})") from exc
            if query.id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate query id {query.id!r}")
            seen.add(query.id)
            queries.append(query)
    return queries


def load_qrels(path: str) -> QrelSet:
    """Load tab-separated qrels: query-id <TAB> corpus-id <TAB> grade.

    An optional header line is skipped. Later duplicates overwrite earlier
    ones with a warning (tolerates concatenated qrels files).
    """
    qrels = QrelSet()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            qid, did, grade_str = parts
            try:
                grade = int(grade_str)
            except ValueError:
                if lineno == 1:  # optional header line
                    continue
                raise FormatError(f"{path}:{lineno}: non-integer grade {grade_str!r}") from None
            if grade < 0:
                raise FormatError(f"{path}:{lineno}: negative grade {grade}")
            if qrels.grade(qid, did) is not None:
                logger.warning("%s:%d: duplicate judgment (%s, %s), keeping the later one",
                               path, lineno, qid, did)
            qrels.add(qid, did, grade)
    return qrels


def read_run(path: str) -> Run:
    """Read a 6-column TREC run file: qid Q0 docid rank score tag.

    The returned Run is re-sorted per the run invariant (score descending,
    doc id ascending on ties); the file's rank column is not trusted.
    """
    entries: dict[str, list[tuple[str, float]]] = {}
    tag: str | None = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            qid, _, did, _, score_str, line_tag = parts
            if tag is None:
                tag = line_tag
            try:
                score = float(score_str)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric score {score_str!r}") from None
            entries.setdefault(qid, []).append((did, score))
    return Run(entries, tag=tag or "run")


def write_run(run: Run, path: str) -> None:
    """Write a run in 6-column TREC format, ranks starting at 1 per query.

    Scores are serialized with repr precision, so read_run(write_run(r))
    reproduces orderings and scores exactly.
    """
    with open(path, "w", encoding="utf-8") as f:
        for qid, pairs in run.entries.items():
            for rank, (did, score) in enumerate(pairs, 1):
                f.write(f"{qid} Q0 {did} {rank} {score!r} {run.tag}\n")
