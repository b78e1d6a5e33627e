"""Cold-start SFT on rejection-sampled traces, and the memorization dataset
built by rewriting retrieval-using traces into retrieval-free ones."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grammar import DEFAULT_TAGS, FormatError, ReasoningTrace, SegmentKind, TagSet, parse
from .policy import ToyPolicy
from .prompts import fill_rewrite
from .remote import RemoteError, RemotePolicyConfig, remote_generate, split_tokens
from .rewards import answer_reward

log = logging.getLogger(__name__)


class RewriteFailed(Exception):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class SFTSample:
    question: str
    tokens: list[str]
    mask: list[int]
    source_id: str = ""

    def __post_init__(self):
        if len(self.tokens) != len(self.mask):
            raise ValueError("mask length differs from token count")
        if not any(self.mask):
            raise ValueError("SFT sample needs at least one unmasked token")

    @property
    def prompt(self) -> list[str]:
        return self.question.split()

    def to_record(self) -> dict:
        return {"question": self.question, "text": " ".join(self.tokens),
                "mask_rle": mask_rle(self.mask), "source": self.source_id}


@dataclass
class MemorySample:
    question_id: str
    question: str
    tokens: list[str]
    provenance: str = ""

    @property
    def prompt(self) -> list[str]:
        return self.question.split()

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_record(self) -> dict:
        return {"question_id": self.question_id, "question": self.question,
                "text": self.text, "provenance": self.provenance}


def make_memory_sample(question_id: str, question: str, text: str, golden: str,
                       tags: TagSet = DEFAULT_TAGS, provenance: str = "") -> MemorySample:
    """Validate a rewritten trace and wrap it; raises RewriteFailed when it is unusable."""
    try:
        trace = parse(text, tags, question)
    except FormatError as e:
        raise RewriteFailed(f"rewrite does not parse: {e}") from None
    if trace.retrieval_count != 0:
        raise RewriteFailed("rewrite still calls the retriever")
    if answer_reward(trace, golden) != 1:
        raise RewriteFailed(f"rewrite answers {trace.final_answer!r}, expected {golden!r}")
    return MemorySample(question_id, question, list(trace.tokens), provenance)


def mask_rle(mask) -> list[list[int]]:
    out: list[list[int]] = []
    for m in mask:
        m = int(m)
        if out and out[-1][0] == m:
            out[-1][1] += 1
        else:
            out.append([m, 1])
    return out


def mask_from_rle(rle) -> list[int]:
    return [v for v, n in rle for _ in range(n)]


# stage 1

def rejection_filter(rollouts, golden, min_internal: int = 1, min_external: int = 1) -> list[SFTSample]:
    """Keep correct, well-formed traces using both internal and external segments.

    ``golden`` is either one answer for every rollout or a mapping from
    question id to answer.
    """
    kept = []
    for r in rollouts:
        gold = golden[r.question_id] if isinstance(golden, dict) else golden
        trace = r.trace
        if trace is None or not r.format_ok or answer_reward(r, gold) != 1:
            continue
        if len(trace.of_kind(SegmentKind.INTERNAL)) < min_internal:
            continue
        if trace.retrieval_count < min_external:
            continue
        kept.append(SFTSample(r.question, list(r.tokens), [int(m) for m in r.mask],
                              f"{r.question_id}/{r.index}"))
    return kept


def sft_loss(policy: ToyPolicy, sample: SFTSample, with_grad: bool = True, out: np.ndarray | None = None,
             scale: float = 1.0):
    """Masked token-level NLL averaged over unmasked tokens.

    With ``out`` the gradient (times ``scale``) is added in place and ``out`` returned.
    """
    grad = None
    if with_grad:
        grad = out if out is not None else np.zeros_like(policy.weights)
    n = sum(sample.mask)
    loss = 0.0
    for t, (ctx, kind) in enumerate(policy.contexts(sample.prompt, sample.tokens)):
        if not sample.mask[t]:
            continue
        logd = policy.log_distribution(ctx, kind)
        tok = policy.vocab.id(sample.tokens[t])
        loss -= logd[tok] / n
        if with_grad:
            cols, vals = policy.sparse_features(ctx, kind)
            q = np.exp(logd)
            q[tok] -= 1.0
            grad[:, cols] += np.outer(q, vals * (scale / n))
    return float(loss), grad


def batch_sft_loss(policy: ToyPolicy, samples, with_grad: bool = True):
    n = len(samples)
    grad = np.zeros_like(policy.weights) if with_grad else None
    total = 0.0
    for s in samples:
        l, _ = sft_loss(policy, s, with_grad, out=grad, scale=1.0 / n)
        total += l
    return total / n, grad


def run_sft(policy: ToyPolicy, samples, epochs: int = 6, batch_size: int = 64, lr: float = 1.0, seed: int = 0):
    """Minibatch gradient descent on the masked SFT loss.

    Returns the trained copy and the per-epoch mean training loss, where
    entry 0 is the loss before training.
    """
    if not samples:
        raise ValueError("run_sft needs at least one sample")
    policy = policy.copy()
    rng = np.random.default_rng(seed)
    losses = [batch_sft_loss(policy, samples, with_grad=False)[0]]
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            batch = [samples[i] for i in order[start:start + batch_size]]
            loss, grad = batch_sft_loss(policy, batch)
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                raise NonFiniteLoss(f"sft loss {loss}")
            policy.weights -= lr * grad
        losses.append(batch_sft_loss(policy, samples, with_grad=False)[0])
    return policy, losses


# stage 2 memorization

def extract_documents(rollout, tags: TagSet = DEFAULT_TAGS) -> list[tuple[str, str]]:
    """(query, document payload) pairs in emission order."""
    trace = rollout.trace if hasattr(rollout, "trace") else rollout
    if trace is None:
        return []
    pairs = []
    pending = None
    for s in trace.segments:
        if s.kind is SegmentKind.EXTERNAL_QUERY:
            pending = s.text.strip()
        elif s.kind is SegmentKind.DOCUMENT and pending is not None:
            pairs.append((pending, s.text.strip()))
            pending = None
    return pairs


_ENTRY = re.compile(r"\((\d+)\)\s*(.*?)\s+—\s+(.*?)(?=\s*\(\d+\)\s|$)", re.S)


def passages_in(payload: str) -> list[tuple[str, str]]:
    """(title, text) entries of a numbered document payload."""
    return [(m.group(2), m.group(3).strip()) for m in _ENTRY.finditer(payload)]


def first_passage_text(query: str, payload: str) -> str:
    entries = passages_in(payload)
    return entries[0][1] if entries else payload


def knowledge_matrix(pairs) -> str:
    """Document block for the rewrite prompt: one retrieved payload per line."""
    return "\n".join(payload for _, payload in pairs)


@dataclass
class RewriterConfig:
    mode: str = "template"
    remote: RemotePolicyConfig | None = None
    prompt_id: str = "rewrite_internal_only"
    # maps (query, payload) to the fact written inside the internal segment
    fact_fn: Callable[[str, str], str] = field(default=first_passage_text)
    tags: TagSet = DEFAULT_TAGS

    def __post_init__(self):
        if self.mode not in ("template", "remote"):
            raise ValueError(f"unknown rewriter mode {self.mode!r}")
        if self.mode == "remote" and self.remote is None:
            raise ValueError("remote rewriter needs an endpoint")


def rewrite(config: RewriterConfig, question: str, documents, answer: str | None = None,
            skeleton: ReasoningTrace | None = None) -> str:
    """Produce a retrieval-free trace text for ``question``.

    Template mode replaces every query/document pair of ``skeleton`` with an
    internal segment holding the pair's fact (or, with no skeleton, emits one
    internal segment per document followed by ``answer``). Remote mode sends
    the rewrite prompt with the documents inlined.
    """
    if not documents:
        raise ValueError("rewrite needs at least one document")
    tags = config.tags
    if config.mode == "remote":
        prompt = fill_rewrite(knowledge_matrix(documents), question)
        try:
            text = remote_generate(config.remote, prompt, temperature=0.0, logprobs=False).text
        except RemoteError as e:
            raise RewriteFailed(str(e)) from None
        if tags.external_open in text or tags.document_open in text:
            raise RewriteFailed("rewrite still contains retrieval tags")
        return " ".join(split_tokens(text, tags))

    facts = [config.fact_fn(q, d) for q, d in documents]
    if skeleton is None:
        if answer is None:
            raise ValueError("template rewrite without a skeleton needs the answer")
        parts = [f"{tags.internal_open} {f} {tags.internal_close}" for f in facts]
        return " ".join(parts + [f"{tags.answer_open} {answer} {tags.answer_close}"])
    out: list[str] = []
    it = iter(facts)
    for s in skeleton.segments:
        if s.kind is SegmentKind.EXTERNAL_QUERY:
            out += [tags.internal_open, *next(it).split(), tags.internal_close]
        elif s.kind is SegmentKind.DOCUMENT:
            continue
        elif s.kind is SegmentKind.THINK:
            out += s.text.split()
        else:
            out += [tags.open_tag(s.kind), *s.text.split(), tags.close_tag(s.kind)]
    return " ".join(out)


def build_memory_dataset(groups, golden_answers: dict, config: RewriterConfig,
                         existing: dict | None = None) -> dict[str, MemorySample]:
    """Rewrite correct retrieval-using rollouts; keep the shortest valid rewrite per question."""
    memory = dict(existing or {})
    for group in sorted(groups, key=lambda g: g.question_id):
        gold = golden_answers[group.question_id]
        for r in sorted(group.rollouts, key=lambda r: r.index):
            if r.retrieval_count < 1 or not r.format_ok or answer_reward(r, gold) != 1:
                continue
            try:
                text = rewrite(config, r.question, extract_documents(r, config.tags),
                               skeleton=r.trace if config.mode == "template" else None)
                sample = make_memory_sample(r.question_id, r.question, text, gold, config.tags,
                                            provenance=f"{r.question_id}/{r.index}")
            except RewriteFailed as e:
                log.debug("skipping rewrite of %s/%s: %s", r.question_id, r.index, e)
                continue
            prev = memory.get(r.question_id)
            if prev is None or len(sample.tokens) < len(prev.tokens):
                memory[r.question_id] = sample
    return memory


def memorization_loss(policy: ToyPolicy, samples, with_grad: bool = True):
    """Token-weighted NLL over retrieval-free traces."""
    grad = np.zeros_like(policy.weights) if with_grad else None
    n = sum(len(s.tokens) for s in samples)
    if n == 0:
        raise ValueError("memorization loss needs at least one token")
    loss = 0.0
    for s in samples:
        for t, (ctx, kind) in enumerate(policy.contexts(s.prompt, s.tokens)):
            logd = policy.log_distribution(ctx, kind)
            tok = policy.vocab.id(s.tokens[t])
            loss -= logd[tok]
            if with_grad:
                cols, vals = policy.sparse_features(ctx, kind)
                q = np.exp(logd)
                q[tok] -= 1.0
                grad[:, cols] += np.outer(q, vals / n)
    return float(loss / n), grad


def save_records(items, path):
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            f.write(json.dumps(it.to_record()) + "\n")


def load_memory(path, tags: TagSet = DEFAULT_TAGS) -> dict[str, MemorySample]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["question_id"]] = MemorySample(rec["question_id"], rec["question"],
                                                       split_tokens(rec["text"], tags), rec.get("provenance", ""))
    return out


def load_sft(path) -> list[SFTSample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(SFTSample(rec["question"], rec["text"].split(" "), mask_from_rle(rec["mask_rle"]),
                                     rec.get("source", "")))
    return out
