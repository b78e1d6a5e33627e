"""Passage store with a BM25 inverted index."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .grammar import DEFAULT_TAGS, TagSet

_PUNCT = re.compile(r"[^\w\s]")


class CorpusError(Exception):
    pass


class ParseError(CorpusError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateId(CorpusError):
    pass


class EmptyQuery(CorpusError):
    pass


def normalize_terms(text: str) -> list[str]:
    return _PUNCT.sub("", text.lower()).split()


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    text: str

    def __post_init__(self):
        if not self.title or not self.text:
            raise ValueError(f"passage {self.id!r} needs a non-empty title and text")


@dataclass
class Corpus:
    passages: dict[str, Passage] = field(default_factory=dict)
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        self._build()

    @classmethod
    def from_passages(cls, passages, k1: float = 1.2, b: float = 0.75) -> "Corpus":
        table: dict[str, Passage] = {}
        for p in passages:
            if p.id in table:
                raise DuplicateId(p.id)
            table[p.id] = p
        return cls(table, k1=k1, b=b)

    def _build(self):
        # title is indexed together with the body, as in title-prefixed wiki dumps
        self.inverted_index: dict[str, list[tuple[str, int]]] = {}
        self.doc_len: dict[str, int] = {}
        for pid in sorted(self.passages):
            p = self.passages[pid]
            terms = normalize_terms(f"{p.title} {p.text}")
            self.doc_len[pid] = len(terms)
            for term, tf in sorted(Counter(terms).items()):
                self.inverted_index.setdefault(term, []).append((pid, tf))
        n = len(self.passages)
        self.avg_len = sum(self.doc_len.values()) / n if n else 0.0
        self.idf = {
            t: math.log(1.0 + (n - len(post) + 0.5) / (len(post) + 0.5))
            for t, post in self.inverted_index.items()
        }

    def __len__(self) -> int:
        return len(self.passages)

    def score_terms(self, terms: list[str]) -> dict[str, float]:
        scores: dict[str, float] = {}
        for term in terms:
            for pid, tf in self.inverted_index.get(term, ()):
                norm = tf + self.k1 * (1 - self.b + self.b * self.doc_len[pid] / self.avg_len)
                scores[pid] = scores.get(pid, 0.0) + self.idf[term] * tf * (self.k1 + 1) / norm
        return scores

    def retrieve(self, query: str, k: int = 5) -> list[Passage]:
        return retrieve(self, query, k)

    def dump(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as f:
            for pid in sorted(self.passages):
                p = self.passages[pid]
                f.write(json.dumps({"id": p.id, "title": p.title, "contents": p.text}) + "\n")


def ingest(path: str | Path) -> Corpus:
    """Load a JSONL corpus with ``id``/``title``/``contents`` records."""
    passages = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pid, title, contents = str(rec["id"]), rec["title"], rec["contents"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(lineno, str(e)) from None
            if pid in seen:
                raise DuplicateId(f"{pid} (line {lineno})")
            seen.add(pid)
            try:
                passages.append(Passage(pid, title, contents))
            except ValueError as e:
                raise ParseError(lineno, str(e)) from None
    return Corpus.from_passages(passages)


def retrieve(corpus: Corpus, query: str, k: int = 5) -> list[Passage]:
    """Top-``k`` passages by BM25 score, ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = normalize_terms(query)
    if not terms:
        raise EmptyQuery(query)
    scores = corpus.score_terms(terms)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [corpus.passages[pid] for pid, s in ranked[:k] if s > 0]


def format_documents(passages: list[Passage], tags: TagSet = DEFAULT_TAGS, wrap: bool = True) -> str:
    """Numbered "(n) title — text" entries, optionally wrapped in document tags."""
    if not passages:
        raise ValueError("format_documents needs at least one passage")
    body = " ".join(f"({i}) {p.title} — {p.text}" for i, p in enumerate(passages, 1))
    if not wrap:
        return body
    return f"{tags.document_open} {body} {tags.document_close}"


NO_RESULTS = Passage("__none__", "none", "no results")
