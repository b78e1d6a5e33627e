"""Format, answer and group rewards."""

from __future__ import annotations

import string
from dataclasses import dataclass

from .grammar import validate_format

FORMAT_PENALTY = -2.0
MAX_ANSWER_WORDS = 10
ETA = 2.0

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> str:
    """Lowercase, replace punctuation with spaces, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def cover_exact_match(prediction: str, golden: str) -> bool:
    gold = normalize_answer(golden)
    if not gold:
        return False
    return gold in normalize_answer(prediction)


def format_reward(parse_result) -> float:
    return 0.0 if validate_format(parse_result) else FORMAT_PENALTY


def answer_correct(answer: str | None, golden: str, max_words: int = MAX_ANSWER_WORDS) -> bool:
    if answer is None:
        return False
    return len(answer.split()) <= max_words and cover_exact_match(answer, golden)


def answer_reward(rollout, golden: str, max_words: int = MAX_ANSWER_WORDS) -> int:
    """1 iff the rollout parsed, its boxed answer has <= 10 words and covers ``golden``."""
    trace = getattr(rollout, "trace", rollout)
    if trace is None or not validate_format(trace):
        return 0
    return int(answer_correct(trace.final_answer, golden, max_words))


@dataclass(frozen=True)
class GroupRewardContext:
    retrieval_counts: tuple[int, ...]
    correct: tuple[bool, ...]
    sigma: float
    t_min: int | None
    eta: float = ETA
    variance: float = 0.0


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_answer: float
    r_group: float

    @property
    def total(self) -> float:
        return self.r_format + self.r_answer + self.r_group

    def to_record(self) -> dict:
        return {"r_format": self.r_format, "r_answer": self.r_answer,
                "r_group": self.r_group, "total": self.total}


def group_context(counts, correct, eta: float = ETA, sigma_over: str = "all") -> GroupRewardContext:
    """Statistics behind the group reward.

    ``sigma_over="all"`` takes the standard deviation over every rollout's
    retrieval count; ``"correct"`` restricts it to correct rollouts.
    """
    counts = tuple(int(t) for t in counts)
    correct = tuple(bool(c) for c in correct)
    if len(counts) != len(correct):
        raise ValueError("counts and correctness flags differ in length")
    if sigma_over == "all":
        pool = counts
    elif sigma_over == "correct":
        pool = tuple(t for t, c in zip(counts, correct) if c)
    else:
        raise ValueError(f"unknown sigma_over {sigma_over!r}")
    # integer sums keep the variance exact and independent of rollout order
    n = len(pool)
    var = (n * sum(t * t for t in pool) - sum(pool) ** 2) / (n * n) if pool else 0.0
    ok = [t for t, c in zip(counts, correct) if c]
    return GroupRewardContext(counts, correct, var ** 0.5, min(ok) if ok else None, eta, var)


def group_rewards_from_counts(counts, correct, eta: float = ETA, sigma_over: str = "all") -> list[float]:
    ctx = group_context(counts, correct, eta, sigma_over)
    if len(counts) < 2:
        raise ValueError("group reward needs at least two rollouts")
    if ctx.t_min is None:
        return [0.0] * len(counts)
    bonus = min(2.0 * ctx.variance, eta)
    return [bonus if (c and t == ctx.t_min) else 0.0 for t, c in zip(ctx.retrieval_counts, ctx.correct)]


def group_rewards(group, golden: str, eta: float = ETA, sigma_over: str = "all") -> list[float]:
    rollouts = group.rollouts if hasattr(group, "rollouts") else list(group)
    correct = [answer_reward(r, golden) == 1 for r in rollouts]
    return group_rewards_from_counts([r.retrieval_count for r in rollouts], correct, eta, sigma_over)


def total_reward(rollout, golden: str, r_group: float) -> RewardBreakdown:
    rf = format_reward(rollout.parsed)
    if rf != 0.0:
        return RewardBreakdown(rf, 0.0, 0.0)
    ra = float(answer_reward(rollout, golden))
    return RewardBreakdown(rf, ra, r_group if ra == 1.0 else 0.0)


def score_group(group, golden: str, eta: float = ETA, use_group_reward: bool = True,
                sigma_over: str = "all") -> list[RewardBreakdown]:
    rg = group_rewards(group, golden, eta, sigma_over) if use_group_reward else [0.0] * len(group.rollouts)
    return [total_reward(r, golden, g) for r, g in zip(group.rollouts, rg)]
