"""REINFORCE++ with document masking: KL-shaped reward-to-go advantages,
global-batch normalization, clipped surrogate, and the memorization term."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .knowledge import NonFiniteLoss, memorization_loss
from .policy import ToyPolicy


class MissingRefLogProbs(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


EPS_NORM = 1e-8


@dataclass
class RLHyperparams:
    beta: float = 1e-4
    clip_eps: float = 0.2
    mu: float = 0.1
    eta: float = 2.0
    learning_rate: float = 2e-6
    G: int = 16

    def __post_init__(self):
        if self.beta < 0 or self.mu < 0:
            raise ValueError("beta and mu must be non-negative")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")


@dataclass
class AdvantageTensor:
    raw: list[np.ndarray]
    normalized: list[np.ndarray]
    mean: float
    std: float


@dataclass
class LossReport:
    j_mask: float
    l_m: float
    total: float
    grad_norm: float

    def to_record(self) -> dict:
        return asdict(self)


def token_kl(rollout) -> np.ndarray:
    """k1 estimate log pi_old - log pi_ref at sampled tokens; 0 on masked tokens."""
    if rollout.logp_old is None or rollout.logp_ref is None:
        raise MissingRefLogProbs(f"rollout {rollout.question_id}/{rollout.index}")
    return np.where(np.asarray(rollout.mask) == 1, rollout.logp_old - rollout.logp_ref, 0.0)


def advantages(rewards, kls, masks, beta: float, eps_norm: float = EPS_NORM) -> AdvantageTensor:
    """Reward-to-go with a KL penalty, normalized over every unmasked token in the batch."""
    if len(rewards) == 0:
        raise ValueError("empty batch")
    raw = []
    for R, kl, m in zip(rewards, kls, masks):
        m = np.asarray(m)
        if not m.any():
            raise ValueError("rollout without unmasked tokens")
        kl = np.where(m == 1, np.asarray(kl, dtype=float), 0.0)
        suffix = np.cumsum(kl[::-1])[::-1]
        raw.append(np.where(m == 1, R - beta * suffix, 0.0))
    pool = np.concatenate([a[np.asarray(m) == 1] for a, m in zip(raw, masks)])
    mean, std = float(pool.mean()), float(pool.std())
    if std < eps_norm:
        raise DegenerateBatch(f"advantage std {std:.3g} below {eps_norm}")
    norm = [np.where(np.asarray(m) == 1, (a - mean) / std, 0.0) for a, m in zip(raw, masks)]
    return AdvantageTensor(raw, norm, mean, std)


def masked_surrogate(policy: ToyPolicy, batch, adv: AdvantageTensor, clip_eps: float = 0.2,
                     with_grad: bool = True):
    """Clipped importance-weighted objective over unmasked tokens and its weight gradient.

    Per rollout the token terms are averaged over unmasked positions, then
    rollouts are averaged.
    """
    grad = np.zeros_like(policy.weights) if with_grad else None
    total = 0.0
    G = len(batch)
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    for r, A in zip(batch, adv.normalized):
        mask = np.asarray(r.mask)
        n = mask.sum()
        acc = 0.0
        for t, (ctx, kind) in enumerate(policy.contexts(r.prompt, r.tokens)):
            if not mask[t]:
                continue
            logd = policy.log_distribution(ctx, kind)
            tok = policy.vocab.id(r.tokens[t])
            p = math.exp(logd[tok] - r.logp_old[t])
            a = A[t]
            unclipped, clipped = p * a, min(max(p, lo), hi) * a
            acc += min(unclipped, clipped)
            if with_grad and unclipped <= clipped:
                # d(p a)/dW = p a dlogp/dW
                coef = p * a / (n * G)
                cols, vals = policy.sparse_features(ctx, kind)
                q = np.exp(logd)
                q[tok] -= 1.0
                grad[:, cols] -= coef * np.outer(q, vals)
        total += acc / n
    return total / G, grad


def attach_logprobs(batch, old: ToyPolicy, ref: ToyPolicy):
    """Fill logp_old / logp_ref on every rollout (masked positions stay 0)."""
    for r in batch:
        r.logp_old = old.sequence_logprobs(r.prompt, r.tokens, r.mask)
        r.logp_ref = ref.sequence_logprobs(r.prompt, r.tokens, r.mask)


def combined_loss(policy: ToyPolicy, batch, adv: AdvantageTensor | None, memory_batch, hp: RLHyperparams):
    """L = -J_mask + mu * L_M and its gradient; either part may be empty."""
    grad = np.zeros_like(policy.weights)
    j = 0.0
    if batch and adv is not None:
        j, gj = masked_surrogate(policy, batch, adv, hp.clip_eps)
        grad -= gj
    lm = 0.0
    if memory_batch and hp.mu > 0:
        lm, gm = memorization_loss(policy, memory_batch)
        grad += hp.mu * gm
    elif memory_batch:
        lm, _ = memorization_loss(policy, memory_batch, with_grad=False)
    return j, lm, -j + hp.mu * lm, grad


def combined_step(policy: ToyPolicy, batch, adv: AdvantageTensor | None, memory_batch,
                  hp: RLHyperparams) -> tuple[ToyPolicy, LossReport]:
    """One gradient-descent step on the combined loss; returns a new policy."""
    j, lm, total, grad = combined_loss(policy, batch, adv, memory_batch, hp)
    gnorm = float(np.linalg.norm(grad))
    if not (math.isfinite(total) and math.isfinite(gnorm)):
        raise NonFiniteLoss(f"loss={total} grad_norm={gnorm}")
    new = policy.copy()
    with np.errstate(invalid="ignore", over="ignore"):
        new.weights -= hp.learning_rate * grad
    if not np.isfinite(new.weights).all():
        raise NonFiniteLoss("update produced non-finite weights")
    return new, LossReport(j, lm, total, gnorm)
