"""Generative-policy contract plus the scripted and toy log-linear policies.

The toy policy scores the next token with ``logits = W @ f(context)`` where
``f`` concatenates a one-hot of the last token, a bag of the last ``w``
tokens, a one-hot of the current segment kind and a bias. ``f`` is sparse,
so every operation touches only the handful of active columns of ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .grammar import DEFAULT_TAGS, SegmentKind, TagSet

EOS = "<eos>"
UNK = "<unk>"
KINDS = list(SegmentKind)
SEGMENT_CAP = 64
TRACE_CAP = 1024


class PolicyError(Exception):
    pass


class UnknownToken(PolicyError):
    pass


class LengthCapExceeded(PolicyError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str], tags: TagSet = DEFAULT_TAGS):
        toks = list(tokens)
        for t in (*tags.special_tokens, EOS, UNK):
            if t not in toks:
                toks.append(t)
        if len(set(toks)) != len(toks):
            raise ValueError("duplicate tokens in vocabulary")
        if len(toks) < 8:
            raise ValueError("vocabulary needs at least 8 symbols")
        self.tokens = toks
        self.tags = tags
        self.index = {t: i for i, t in enumerate(toks)}
        self.unk_id = self.index[UNK]
        self.eos_id = self.index[EOS]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UnknownToken(token) from None

    def context_id(self, token: str) -> int:
        # unseen context symbols (e.g. document text) share the unk feature
        return self.index.get(token, self.unk_id)


def next_kind(kind: SegmentKind, token: str, tags: TagSet) -> SegmentKind:
    """Segment kind of the position following ``token``."""
    if token in tags.openers:
        return tags.openers[token]
    if token in tags.closers:
        return SegmentKind.THINK
    if token == tags.answer_close and kind is SegmentKind.FINAL_ANSWER:
        return SegmentKind.THINK
    return kind


def segment_kind(context: Sequence[str], tags: TagSet) -> SegmentKind:
    kind = SegmentKind.THINK
    for t in context:
        kind = next_kind(kind, t, tags)
    return kind


@dataclass
class TokenLogProbs:
    tokens: list[str]
    current: np.ndarray
    old: np.ndarray | None = None
    ref: np.ndarray | None = None

    def __post_init__(self):
        self.current = np.asarray(self.current, dtype=float)
        if len(self.current) != len(self.tokens):
            raise ValueError("log-prob length differs from token count")


@dataclass
class SegmentSample:
    tokens: list[str]
    logps: list[float] | None
    capped: bool = False


class Policy(Protocol):
    def sample_segment(self, prompt: Sequence[str], partial: Sequence[str], gen, rng,
                       stop_tokens: set[str], forbidden: set[str] = ...) -> SegmentSample: ...


@dataclass
class GenParams:
    temperature: float = 1.0
    top_p: float = 0.95
    greedy: bool = False
    segment_cap: int = SEGMENT_CAP
    trace_cap: int = TRACE_CAP

    def __post_init__(self):
        if not self.greedy and self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


class ToyPolicy:
    """Autoregressive log-linear token model over a fixed vocabulary."""

    def __init__(self, vocab: Vocabulary, window: int = 4, weights: np.ndarray | None = None):
        self.vocab = vocab
        self.window = window
        V = len(vocab)
        self.feature_dim = 2 * V + len(KINDS) + 1
        if weights is None:
            weights = np.zeros((V, self.feature_dim))
        if weights.shape != (V, self.feature_dim):
            raise ValueError(f"weights must have shape {(V, self.feature_dim)}")
        self.weights = np.asarray(weights, dtype=float)

    @property
    def tags(self) -> TagSet:
        return self.vocab.tags

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.vocab, self.window, self.weights.copy())

    # features

    def sparse_features(self, context: Sequence[str], kind: SegmentKind | None = None):
        """Active feature columns and their values for ``context``."""
        V = len(self.vocab)
        bias = self.feature_dim - 1
        if not context:
            return np.array([bias]), np.array([1.0])
        if kind is None:
            kind = segment_kind(context, self.tags)
        counts: dict[int, float] = {}
        counts[self.vocab.context_id(context[-1])] = 1.0
        for t in context[-self.window:]:
            j = V + self.vocab.context_id(t)
            counts[j] = counts.get(j, 0.0) + 1.0
        counts[2 * V + KINDS.index(kind)] = 1.0
        counts[bias] = 1.0
        cols = np.fromiter(counts.keys(), dtype=int)
        return cols, np.fromiter(counts.values(), dtype=float)

    def features(self, context: Sequence[str]) -> np.ndarray:
        cols, vals = self.sparse_features(context)
        f = np.zeros(self.feature_dim)
        f[cols] = vals
        return f

    # scoring

    def _logits(self, cols, vals) -> np.ndarray:
        return self.weights[:, cols] @ vals

    def log_distribution(self, context: Sequence[str], kind: SegmentKind | None = None) -> np.ndarray:
        z = self._logits(*self.sparse_features(context, kind))
        m = z.max()
        return z - (m + np.log(np.exp(z - m).sum()))

    def logprob(self, context: Sequence[str], token: str) -> float:
        return float(self.log_distribution(context)[self.vocab.id(token)])

    def grad_logprob(self, context: Sequence[str], token: str) -> np.ndarray:
        """Dense d logp(token | context) / dW."""
        g = np.zeros_like(self.weights)
        self.accumulate_grad(g, context, token, 1.0)
        return g

    def accumulate_grad(self, out: np.ndarray, context: Sequence[str], token: str, coef: float,
                        kind: SegmentKind | None = None):
        """out += coef * d logp(token | context) / dW."""
        cols, vals = self.sparse_features(context, kind)
        p = np.exp(self._log_softmax(cols, vals))
        p[self.vocab.id(token)] -= 1.0
        out[:, cols] -= coef * np.outer(p, vals)

    def _log_softmax(self, cols, vals):
        z = self._logits(cols, vals)
        m = z.max()
        return z - (m + np.log(np.exp(z - m).sum()))

    def contexts(self, prompt: Sequence[str], tokens: Sequence[str]):
        """Yield (window, kind) for each position of ``tokens`` after ``prompt``.

        The window holds the last ``self.window`` context tokens, which is all
        the feature map reads.
        """
        ctx = list(prompt)
        kind = segment_kind(ctx, self.tags)
        w = max(self.window, 1)
        for t in tokens:
            yield tuple(ctx[-w:]), kind
            ctx.append(t)
            kind = next_kind(kind, t, self.tags)

    def sequence_logprobs(self, prompt: Sequence[str], tokens: Sequence[str],
                          mask: Sequence[int] | None = None) -> np.ndarray:
        """Per-token log-probs of ``tokens`` continuing ``prompt``; masked positions get 0."""
        out = np.zeros(len(tokens))
        for i, (ctx, kind) in enumerate(self.contexts(prompt, tokens)):
            if mask is not None and not mask[i]:
                continue
            out[i] = self.log_distribution(ctx, kind)[self.vocab.id(tokens[i])]
        return out

    # sampling

    def sample_segment(self, prompt, partial, gen: GenParams, rng: np.random.Generator,
                       stop_tokens: set[str], forbidden: set[str] = frozenset()) -> SegmentSample:
        ctx = list(prompt) + list(partial)
        kind = segment_kind(ctx, self.tags)
        forbid = [self.vocab.id(t) for t in forbidden if t in self.vocab]
        out, logps = [], []
        cap = min(gen.segment_cap, gen.trace_cap - len(partial))
        while len(out) < cap:
            logp = self.log_distribution(ctx, kind)
            j = _draw(logp, gen, rng, forbid)
            tok = self.vocab.tokens[j]
            out.append(tok)
            logps.append(float(logp[j]))
            ctx.append(tok)
            kind = next_kind(kind, tok, self.tags)
            if tok in stop_tokens:
                return SegmentSample(out, logps)
        return SegmentSample(out, logps, capped=True)


def _draw(logp: np.ndarray, gen: GenParams, rng: np.random.Generator, forbid: list[int]) -> int:
    z = logp.copy()
    if forbid:
        z[forbid] = -np.inf
    if gen.greedy:
        return int(np.argmax(z))
    z = z / gen.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    if gen.top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        keep = order[: int(np.searchsorted(csum, gen.top_p)) + 1]
        q = np.zeros_like(p)
        q[keep] = p[keep]
        p = q / q.sum()
    return int(rng.choice(len(p), p=p))


@dataclass
class ScriptedPolicy:
    """Replays fixed model-side token sequences; each call emits up to the next stop token.

    ``script`` is a token list replayed for every rollout, or a callable
    mapping the prompt text to a token list. Injected documents are not part
    of the script.
    """

    script: object
    tags: TagSet = DEFAULT_TAGS

    def tokens_for(self, prompt) -> list[str]:
        if callable(self.script):
            return list(self.script(" ".join(prompt)))
        return list(self.script)

    def _emitted(self, partial) -> int:
        n, inside = 0, False
        for t in partial:
            if t == self.tags.document_open:
                inside = True
            elif t == self.tags.document_close:
                inside = False
            elif not inside:
                n += 1
        return n

    def sample_segment(self, prompt, partial, gen, rng, stop_tokens, forbidden=frozenset()) -> SegmentSample:
        script = self.tokens_for(prompt)
        out = []
        cap = min(gen.segment_cap, gen.trace_cap - len(partial))
        for tok in script[self._emitted(partial):]:
            if tok in forbidden:
                break
            out.append(tok)
            if tok in stop_tokens or len(out) >= cap:
                break
        capped = len(out) >= cap and out[-1] not in stop_tokens
        if not out:
            out = [EOS]
        return SegmentSample(out, [0.0] * len(out), capped=capped)
