"""Ablation arms and the measurements taken on them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .evaluation import EvalReport, evaluate
from .pipeline import build_world, policy_from, run_stage1, run_stage2, seeded_policy
from .world import World, recitation_sample

log = logging.getLogger(__name__)

ARMS = {
    "full": {},
    "no_stage1": {"no_stage1": True},
    "no_group_reward": {"no_group_reward": True},
    "no_memorization": {"no_memorization": True},
    "no_group_reward+no_memorization": {"no_group_reward": True, "no_memorization": True},
}


@dataclass
class ArmResult:
    arm: str
    seed: int
    stage1_eval: EvalReport
    final_eval: EvalReport
    dynamics: list[dict]
    fact_deltas: dict[str, float] = field(default_factory=dict)
    trace_deltas: dict[str, float] = field(default_factory=dict)

    def rc_at_convergence(self, last: int = 10) -> float:
        """Mean training retrieval count over the final ``last`` steps."""
        tail = self.dynamics[-last:]
        return float(np.mean([r["rc_mean"] for r in tail])) if tail else math.nan

    def summary(self) -> dict:
        return {
            "arm": self.arm, "seed": self.seed,
            "stage1_acc": self.stage1_eval.judge_accuracy, "final_acc": self.final_eval.judge_accuracy,
            "stage1_rc": self.stage1_eval.rc, "final_rc": self.final_eval.rc,
            "train_rc": self.rc_at_convergence(), "n_memory_facts": len(self.fact_deltas),
        }


def memory_facts(world: World, memory) -> list[str]:
    """External facts whose object is recalled inside some retrieval-free trace of ``memory``."""
    by_id = {q.id: q for q in world.questions}
    out = set()
    for qid, sample in memory.items():
        for fid in by_id[qid].hops:
            f = world.fact(fid)
            if f.channel == "external" and "@" + f.object in sample.tokens:
                out.add(fid)
    return sorted(out)


def fact_logprob(policy, world: World, fact_id: str) -> tuple[float, float]:
    """(object-token log-prob, mean trace log-prob) of answering the fact without retrieval."""
    s = recitation_sample(world.fact(fact_id), policy.tags)
    lp = policy.sequence_logprobs(s.prompt, s.tokens)
    return float(lp[2]), float(lp.mean())


# stage 1 ignores the stage-2 ablation flags, so arms sharing it reuse one run
_STAGE1: dict = {}


def _stage1(cfg: RunConfig, world: World, save: bool):
    key = cfg.replace(no_group_reward=False, no_memorization=False, out_dir="").echo()
    if save or key not in _STAGE1:
        s1 = run_stage1(cfg, world, seeded_policy(cfg, world), save=save)
        p1 = policy_from(s1.checkpoint.weights, world, cfg)
        e1 = evaluate(p1, world.corpus, world.eval, cfg.gen, k=cfg.retrieval_k, tags=cfg.tagset,
                      max_retrievals=cfg.max_retrievals)
        _STAGE1[key] = (s1, p1, e1)
    return _STAGE1[key]


def run_arm(config: RunConfig, arm: str = "full", save: bool = False) -> ArmResult:
    cfg = config.replace(**ARMS[arm])
    world = build_world(cfg)
    s1, p1, e1 = _stage1(cfg, world, save)
    ev = dict(k=cfg.retrieval_k, tags=cfg.tagset, max_retrievals=cfg.max_retrievals)
    s2 = run_stage2(cfg, s1.checkpoint, world, save=save)
    p2 = policy_from(s2.checkpoint.weights, world, cfg)
    e2 = evaluate(p2, world.corpus, world.eval, cfg.gen, **ev)
    fact_d, trace_d = {}, {}
    for fid in memory_facts(world, s2.checkpoint.memory):
        a, b = fact_logprob(p1, world, fid), fact_logprob(p2, world, fid)
        fact_d[fid] = b[0] - a[0]
        trace_d[fid] = b[1] - a[1]
    return ArmResult(arm, cfg.seed, e1, e2, s2.dynamics, fact_d, trace_d)


def sign_test(deltas) -> tuple[int, int, float]:
    """Two-sided exact sign test; zeros are dropped. Returns (n_pos, n_neg, p)."""
    pos = sum(1 for d in deltas if d > 0)
    neg = sum(1 for d in deltas if d < 0)
    n = pos + neg
    if n == 0:
        return 0, 0, 1.0
    k = min(pos, neg)
    p = 2 * sum(math.comb(n, i) for i in range(k + 1)) / 2 ** n
    return pos, neg, min(1.0, p)
