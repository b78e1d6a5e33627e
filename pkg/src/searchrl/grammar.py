"""Reasoning-trace format: tag sets, parsing, validation, serialization.

A trace is free text interleaved with tagged segments::

    think ... <internal> recalled fact </internal> ...
    <external> query </external><document> retrieved text </document>
    ... \\boxed{answer}

Tokens are whitespace-delimited symbols; special tags are always their own
token, even when glued to neighbouring text.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import cached_property


class SegmentKind(enum.Enum):
    THINK = "think"
    INTERNAL = "internal"
    EXTERNAL_QUERY = "external_query"
    DOCUMENT = "document"
    FINAL_ANSWER = "final_answer"


class FormatErrorKind(enum.Enum):
    UNBALANCED_TAG = "UnbalancedTag"
    DOCUMENT_WITHOUT_QUERY = "DocumentWithoutQuery"
    MISSING_ANSWER = "MissingAnswer"
    MULTIPLE_ANSWERS = "MultipleAnswers"
    ILLEGAL_NESTING = "IllegalNesting"
    GARBLED = "Garbled"


class FormatError(Exception):
    """First format violation found while parsing a trace."""

    def __init__(self, kind: FormatErrorKind, message: str, position: int = -1):
        self.kind = kind
        self.message = message
        self.position = position
        super().__init__(f"{kind.value}: {message}" + (f" at {position}" if position >= 0 else ""))


@dataclass(frozen=True)
class TagSet:
    internal_open: str
    internal_close: str
    external_open: str
    external_close: str
    document_open: str
    document_close: str
    answer_open: str = "\\boxed{"
    answer_close: str = "}"
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        seg = self.segment_tokens
        if any(not t for t in seg) or len(set(seg)) != 6:
            raise ValueError("segment tags must be six distinct non-empty strings")
        if not self.answer_open or not self.answer_close or self.answer_open == self.answer_close:
            raise ValueError("answer delimiters must be distinct non-empty strings")
        if self.answer_open in seg or self.answer_close in seg:
            raise ValueError("answer delimiters must differ from segment tags")

    @property
    def segment_tokens(self) -> tuple[str, ...]:
        return (
            self.internal_open, self.internal_close,
            self.external_open, self.external_close,
            self.document_open, self.document_close,
        )

    @property
    def special_tokens(self) -> tuple[str, ...]:
        return self.segment_tokens + (self.answer_open, self.answer_close)

    @cached_property
    def openers(self) -> dict[str, SegmentKind]:
        return {
            self.internal_open: SegmentKind.INTERNAL,
            self.external_open: SegmentKind.EXTERNAL_QUERY,
            self.document_open: SegmentKind.DOCUMENT,
            self.answer_open: SegmentKind.FINAL_ANSWER,
        }

    @cached_property
    def closers(self) -> dict[str, SegmentKind]:
        return {
            self.internal_close: SegmentKind.INTERNAL,
            self.external_close: SegmentKind.EXTERNAL_QUERY,
            self.document_close: SegmentKind.DOCUMENT,
        }

    def open_tag(self, kind: SegmentKind) -> str:
        return {v: k for k, v in self.openers.items()}[kind]

    def close_tag(self, kind: SegmentKind) -> str:
        if kind is SegmentKind.FINAL_ANSWER:
            return self.answer_close
        return {v: k for k, v in self.closers.items()}[kind]

    @cached_property
    def _segment_pattern(self) -> re.Pattern:
        toks = sorted(self.segment_tokens + (self.answer_open,), key=len, reverse=True)
        return re.compile("|".join(re.escape(t) for t in toks))

    @cached_property
    def _fragment_pattern(self) -> re.Pattern:
        # a fragment is a tag's core name touching tag punctuation, e.g. "<|begin_ext" or "internal>"
        cores = set()
        for t in self.segment_tokens:
            core = t.strip("<>|/ ")
            if core:
                cores.add(re.escape(core))
        alt = "|".join(sorted(cores, key=len, reverse=True))
        return re.compile(rf"(?:<\|?/?|\|)(?:{alt})|(?:{alt})(?:\|?>|\|)|<\|begin_|<\|end_")


SHORT_TAGS = TagSet(
    "<internal>", "</internal>",
    "<external>", "</external>",
    "<document>", "</document>",
    name="short",
)

LONG_TAGS = TagSet(
    "<|begin_internal_answer|>", "<|end_internal_answer|>",
    "<|begin_external_search|>", "<|end_external_search|>",
    "<|begin_search_result|>", "<|end_search_result|>",
    name="long",
)

DEFAULT_TAGS = LONG_TAGS
TAG_SETS = {"short": SHORT_TAGS, "long": LONG_TAGS}


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    text: str
    token_span: tuple[int, int]
    # provenance is runtime metadata; a re-parsed trace cannot recover it
    doc_ids: tuple[str, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class ReasoningTrace:
    question: str
    segments: tuple[Segment, ...]
    tokens: tuple[str, ...]
    final_answer: str | None

    @property
    def retrieval_count(self) -> int:
        return sum(s.kind is SegmentKind.EXTERNAL_QUERY for s in self.segments)

    def of_kind(self, kind: SegmentKind) -> list[Segment]:
        return [s for s in self.segments if s.kind is kind]

    def document_mask(self) -> list[int]:
        """1 for every token outside Document segments, 0 inside."""
        mask = [1] * len(self.tokens)
        for s in self.segments:
            if s.kind is SegmentKind.DOCUMENT:
                for i in range(*s.token_span):
                    mask[i] = 0
        return mask


def segment_tokens(kind: SegmentKind, text: str, tags: TagSet) -> list[str]:
    if kind is SegmentKind.THINK:
        return text.split()
    return [tags.open_tag(kind), *text.split(), tags.close_tag(kind)]


def tokenize(text: str, tags: TagSet = DEFAULT_TAGS) -> list[str]:
    """Tag-aware whitespace tokenization of a legal trace."""
    return list(parse(text, tags).tokens)


def _has_garbage(text: str, tags: TagSet) -> bool:
    if "�" in text:
        return True
    if any((ord(c) < 32 and c not in "\n\t\r") or 0xD800 <= ord(c) <= 0xDFFF for c in text):
        return True
    return tags._fragment_pattern.search(text) is not None


def _answer_end(text: str, start: int, tags: TagSet) -> int:
    """Index of the closing delimiter matching an answer that starts at ``start``."""
    depth = 0
    i = start
    brace_open = tags.answer_open[-1] if tags.answer_open.endswith("{") else None
    while i < len(text):
        if text.startswith(tags.answer_close, i):
            if depth == 0:
                return i
            depth -= 1
            i += len(tags.answer_close)
            continue
        if brace_open and text[i] == brace_open:
            depth += 1
        i += 1
    return -1


def parse(raw_text: str | bytes, tags: TagSet = DEFAULT_TAGS, question: str = "") -> ReasoningTrace:
    """Parse ``raw_text`` into a trace or raise the first FormatError."""
    if isinstance(raw_text, (bytes, bytearray)):
        try:
            text = bytes(raw_text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(FormatErrorKind.GARBLED, "invalid utf-8 bytes", e.start) from None
    else:
        text = raw_text

    segments: list[Segment] = []
    tokens: list[str] = []
    answers: list[str] = []

    def emit(kind: SegmentKind, body: str, pos: int):
        if kind is not SegmentKind.DOCUMENT and _has_garbage(body, tags):
            raise FormatError(FormatErrorKind.GARBLED, "garbled or unmatched tag fragment", pos)
        toks = segment_tokens(kind, body, tags)
        segments.append(Segment(kind, body, (len(tokens), len(tokens) + len(toks))))
        tokens.extend(toks)

    def last_non_blank() -> Segment | None:
        for s in reversed(segments):
            if s.kind is not SegmentKind.THINK or s.text.strip():
                return s
        return None

    pos = 0
    pat = tags._segment_pattern
    while pos < len(text):
        m = pat.search(text, pos)
        if m is None:
            emit(SegmentKind.THINK, text[pos:], pos)
            break
        if m.start() > pos:
            emit(SegmentKind.THINK, text[pos:m.start()], pos)
        tok = m.group()
        if tok in tags.closers:
            raise FormatError(FormatErrorKind.UNBALANCED_TAG, f"{tok!r} without opener", m.start())
        kind = tags.openers[tok]
        prev = last_non_blank()
        if prev is not None and prev.kind is SegmentKind.EXTERNAL_QUERY and kind is not SegmentKind.DOCUMENT:
            raise FormatError(FormatErrorKind.UNBALANCED_TAG, "external query not followed by a document", m.start())
        if kind is SegmentKind.DOCUMENT and (prev is None or prev.kind is not SegmentKind.EXTERNAL_QUERY):
            raise FormatError(FormatErrorKind.DOCUMENT_WITHOUT_QUERY, "document not preceded by a query", m.start())
        body_start = m.end()
        if kind is SegmentKind.FINAL_ANSWER:
            end = _answer_end(text, body_start, tags)
            if end < 0:
                raise FormatError(FormatErrorKind.UNBALANCED_TAG, "unterminated answer", m.start())
            body = text[body_start:end]
            if pat.search(body):
                raise FormatError(FormatErrorKind.ILLEGAL_NESTING, "tag inside answer", m.start())
            if answers:
                raise FormatError(FormatErrorKind.MULTIPLE_ANSWERS, "second answer", m.start())
            if not body.strip():
                raise FormatError(FormatErrorKind.MISSING_ANSWER, "empty answer", m.start())
            answers.append(body.strip())
            emit(kind, body, m.start())
            pos = end + len(tags.answer_close)
            continue
        close = tags.close_tag(kind)
        inner = pat.search(text, body_start)
        if inner is None:
            raise FormatError(FormatErrorKind.UNBALANCED_TAG, f"{tok!r} never closed", m.start())
        if inner.group() != close:
            if inner.group() in tags.openers:
                raise FormatError(FormatErrorKind.ILLEGAL_NESTING, f"{inner.group()!r} inside {tok!r}", inner.start())
            raise FormatError(FormatErrorKind.UNBALANCED_TAG, f"{inner.group()!r} closes {tok!r}", inner.start())
        emit(kind, text[body_start:inner.start()], m.start())
        pos = inner.end()

    prev = last_non_blank()
    if prev is not None and prev.kind is SegmentKind.EXTERNAL_QUERY:
        raise FormatError(FormatErrorKind.UNBALANCED_TAG, "trace ends on an unanswered query", len(text))
    if not answers:
        raise FormatError(FormatErrorKind.MISSING_ANSWER, "no boxed answer", len(text))
    return ReasoningTrace(question, tuple(segments), tuple(tokens), answers[0])


def validate_format(result) -> bool:
    """True iff ``result`` is a successfully parsed trace (parse enforces every rule)."""
    if not isinstance(result, ReasoningTrace):
        return False
    n_q = result.retrieval_count
    n_d = len(result.of_kind(SegmentKind.DOCUMENT))
    return n_q == n_d and result.final_answer is not None


def try_parse(raw_text: str | bytes, tags: TagSet = DEFAULT_TAGS, question: str = ""):
    """``parse`` that returns the FormatError instead of raising it."""
    try:
        return parse(raw_text, tags, question)
    except FormatError as e:
        return e


def serialize(trace: ReasoningTrace, tags: TagSet = DEFAULT_TAGS) -> str:
    out = []
    for s in trace.segments:
        if s.kind is SegmentKind.THINK:
            out.append(s.text)
        else:
            out.append(tags.open_tag(s.kind) + s.text + tags.close_tag(s.kind))
    return "".join(out)


def build_trace(question: str, parts: list[tuple[SegmentKind, str]], tags: TagSet = DEFAULT_TAGS) -> ReasoningTrace:
    """Assemble a trace from (kind, text) parts, computing token spans."""
    segments, tokens = [], []
    answer = None
    for kind, text in parts:
        toks = segment_tokens(kind, text, tags)
        segments.append(Segment(kind, text, (len(tokens), len(tokens) + len(toks))))
        tokens.extend(toks)
        if kind is SegmentKind.FINAL_ANSWER:
            answer = text.strip()
    return ReasoningTrace(question, tuple(segments), tuple(tokens), answer)


def reconcile_tags(text: str, src: TagSet, dst: TagSet) -> str:
    """Rewrite every special tag of ``src`` in ``text`` into its ``dst`` counterpart."""
    mapping = dict(zip(src.special_tokens, dst.special_tokens))
    toks = sorted(src.segment_tokens + (src.answer_open,), key=len, reverse=True)
    return re.sub("|".join(re.escape(t) for t in toks), lambda m: mapping[m.group()], text)
