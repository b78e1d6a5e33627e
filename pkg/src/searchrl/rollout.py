"""Interactive generate → retrieve → inject loop producing masked rollouts."""

from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import NO_RESULTS, CorpusError, format_documents
from .grammar import (DEFAULT_TAGS, FormatError, ReasoningTrace, SegmentKind, TagSet, try_parse,
                      validate_format)
from .policy import EOS, GenParams, next_kind, segment_kind
from .remote import split_tokens

log = logging.getLogger(__name__)

MAX_RETRIEVALS = 8
DEFAULT_K = 5


@dataclass
class Rollout:
    question_id: str
    question: str
    tokens: list[str]
    logps: np.ndarray
    mask: np.ndarray
    retrieval_count: int
    truncated: bool
    parsed: ReasoningTrace | FormatError
    index: int = 0
    eval_only: bool = False
    logp_old: np.ndarray | None = None
    logp_ref: np.ndarray | None = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @property
    def format_ok(self) -> bool:
        return validate_format(self.parsed)

    @property
    def trace(self) -> ReasoningTrace | None:
        return self.parsed if isinstance(self.parsed, ReasoningTrace) else None

    @property
    def prompt(self) -> list[str]:
        return self.question.split()

    def to_record(self) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "index": self.index,
            "text": self.text,
            "tokens": self.tokens,
            "mask": [int(m) for m in self.mask],
            "logprobs": [float(x) for x in self.logps],
            "retrieval_count": self.retrieval_count,
            "format_ok": self.format_ok,
            "truncated": self.truncated,
            "eval_only": self.eval_only,
        }

    @classmethod
    def from_record(cls, rec: dict, tags: TagSet = DEFAULT_TAGS) -> "Rollout":
        return cls(
            question_id=rec["question_id"], question=rec["question"], tokens=list(rec["tokens"]),
            logps=np.asarray(rec["logprobs"], dtype=float), mask=np.asarray(rec["mask"], dtype=int),
            retrieval_count=rec["retrieval_count"], truncated=rec["truncated"],
            parsed=try_parse(" ".join(rec["tokens"]), tags, rec["question"]),
            index=rec.get("index", 0), eval_only=rec.get("eval_only", False),
        )


@dataclass
class RolloutGroup:
    question_id: str
    question: str
    rollouts: list[Rollout] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rollouts)


def rollout_rng(seed: int, question_id: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(str(question_id).encode()), index])


def _retrieve(retriever, query: str, k: int):
    try:
        hits = retriever.retrieve(query, k)
    except (CorpusError, ValueError) as e:
        log.debug("retrieval failed for %r: %s", query, e)
        hits = []
    return hits or [NO_RESULTS]


def run_rollout(policy, retriever, question, gen: GenParams | None = None, max_retrievals: int = MAX_RETRIEVALS,
                rng: np.random.Generator | None = None, k: int = DEFAULT_K, tags: TagSet = DEFAULT_TAGS,
                index: int = 0) -> Rollout:
    """Generate one trace for ``question`` (an object with ``id`` and ``question``)."""
    if max_retrievals < 0:
        raise ValueError("max_retrievals must be >= 0")
    gen = gen or GenParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    prompt = question.question.split()
    tokens: list[str] = []
    logps: list[float] = []
    mask: list[int] = []
    doc_ids: list[tuple[str, ...]] = []
    count = 0
    truncated = False
    eval_only = False
    stops = {tags.external_close, tags.answer_close, EOS}
    kind = segment_kind(prompt, tags)

    kind_before = kind
    while True:
        forbidden = {tags.external_open} if count >= max_retrievals else set()
        seg = policy.sample_segment(prompt, tokens, gen, rng, stops, forbidden)
        for t in seg.tokens:
            kind_before = kind
            kind = next_kind(kind, t, tags)
        tokens.extend(seg.tokens)
        mask.extend([1] * len(seg.tokens))
        if seg.logps is None:
            eval_only = True
            logps.extend([0.0] * len(seg.tokens))
        else:
            logps.extend(seg.logps)
        last = seg.tokens[-1]
        if seg.capped or len(tokens) >= gen.trace_cap:
            truncated = True
            break
        if last == tags.external_close:
            if kind_before is not SegmentKind.EXTERNAL_QUERY:
                # stray closer: the trace is malformed, stop and let the parser say so
                break
            count += 1
            qstart = len(tokens) - 1 - tokens[::-1].index(tags.external_open)
            query = " ".join(tokens[qstart + 1:-1])
            hits = _retrieve(retriever, query, k)
            doc = split_tokens(format_documents(hits, tags), tags)
            doc_ids.append(tuple(p.id for p in hits))
            tokens.extend(doc)
            mask.extend([0] * len(doc))
            logps.extend([0.0] * len(doc))
            continue
        if last == tags.answer_close and kind_before is SegmentKind.FINAL_ANSWER:
            break
        if last == EOS:
            truncated = count >= max_retrievals and tags.answer_open not in tokens
            break
        if last in forbidden:
            truncated = True
            break

    parsed = try_parse(" ".join(tokens), tags, question.question)
    if isinstance(parsed, ReasoningTrace) and doc_ids:
        it = iter(doc_ids)
        segs = tuple(dataclasses.replace(s, doc_ids=next(it)) if s.kind is SegmentKind.DOCUMENT else s
                     for s in parsed.segments)
        parsed = dataclasses.replace(parsed, segments=segs)
    return Rollout(question.id, question.question, tokens, np.asarray(logps), np.asarray(mask, dtype=int),
                   count, truncated, parsed, index=index, eval_only=eval_only)


def run_group(policy, retriever, question, G: int = 16, gen: GenParams | None = None, seed: int = 0,
              max_retrievals: int = MAX_RETRIEVALS, k: int = DEFAULT_K, tags: TagSet = DEFAULT_TAGS) -> RolloutGroup:
    if G < 2:
        raise ValueError("a rollout group needs G >= 2")
    group = RolloutGroup(question.id, question.question)
    for i in range(G):
        rng = rollout_rng(seed, question.id, i)
        group.rollouts.append(run_rollout(policy, retriever, question, gen, max_retrievals, rng, k, tags, index=i))
    return group


def dump_rollouts(rollouts, path):
    with open(path, "w", encoding="utf-8") as f:
        for r in rollouts:
            f.write(json.dumps(r.to_record()) + "\n")


def load_rollouts(path, tags: TagSet = DEFAULT_TAGS) -> list[Rollout]:
    with open(path, encoding="utf-8") as f:
        return [Rollout.from_record(json.loads(line), tags) for line in f if line.strip()]
