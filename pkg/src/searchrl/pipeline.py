"""Two-stage training orchestration: cold-start SFT, then RL with memorization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .knowledge import (MemorySample, NonFiniteLoss, RewriterConfig, build_memory_dataset, load_memory,
                        rejection_filter, run_sft, save_records)
from .policy import ToyPolicy
from .rewards import answer_reward, score_group
from .rl import DegenerateBatch, advantages, attach_logprobs, combined_step, token_kl
from .rollout import run_group
from .world import World, base_policy, fact_of_document, generate_world

log = logging.getLogger(__name__)


class EmptyColdStartSet(RuntimeError):
    pass


@dataclass
class Checkpoint:
    weights: np.ndarray
    step: int
    rng_state: dict
    memory: dict[str, MemorySample] = field(default_factory=dict)
    ref_weights: np.ndarray | None = None
    stage: str = "stage2"

    def save(self, path: str | Path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        arrays = {"weights": self.weights}
        if self.ref_weights is not None:
            arrays["ref_weights"] = self.ref_weights
        np.savez(path / "weights.npz", **arrays)
        (path / "state.json").write_text(json.dumps({"step": self.step, "stage": self.stage,
                                                     "rng_state": self.rng_state}))
        save_records(sorted(self.memory.values(), key=lambda m: m.question_id), path / "memory.jsonl")

    @classmethod
    def load(cls, path: str | Path, tags=None) -> "Checkpoint":
        path = Path(path)
        with np.load(path / "weights.npz") as z:
            weights = z["weights"].copy()
            ref = z["ref_weights"].copy() if "ref_weights" in z else None
        state = json.loads((path / "state.json").read_text())
        kw = {} if tags is None else {"tags": tags}
        memory = load_memory(path / "memory.jsonl", **kw) if (path / "memory.jsonl").exists() else {}
        return cls(weights, state["step"], state["rng_state"], memory, ref, state.get("stage", "stage2"))


# world and base policy are pure functions of the config; cache them per process
_WORLDS: dict = {}
_BASES: dict = {}


def build_world(config: RunConfig) -> World:
    key = tuple(sorted(config.world_params.items()))
    if key not in _WORLDS:
        _WORLDS[key] = generate_world(**config.world_params)
    return _WORLDS[key]


def seeded_policy(config: RunConfig, world: World | None = None) -> ToyPolicy:
    world = world or build_world(config)
    key = (world.digest(), config.seed, config.tags, config.retrieval_k, config.window)
    if key not in _BASES:
        _BASES[key] = base_policy(world, config.seed, config.tagset, config.retrieval_k, config.window)
    return _BASES[key].copy()


def policy_from(weights: np.ndarray, world: World, config: RunConfig) -> ToyPolicy:
    return ToyPolicy(world.vocabulary(config.tagset, config.retrieval_k), config.window, weights.copy())


def _stage_rng(config: RunConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stage])


@dataclass
class Stage1Result:
    checkpoint: Checkpoint
    n_samples: int
    losses: list[float]
    skipped: bool = False


def run_stage1(config: RunConfig, world: World | None = None, policy: ToyPolicy | None = None,
               save: bool = True) -> Stage1Result:
    """Rejection-sample the seeded policy on training questions and fine-tune on the survivors."""
    world = world or build_world(config)
    policy = policy if policy is not None else seeded_policy(config, world)
    rng_state = _stage_rng(config, 2).bit_generator.state
    if config.no_stage1:
        ck = Checkpoint(policy.weights.copy(), 0, rng_state, {}, policy.weights.copy(), "stage1")
        return Stage1Result(ck, 0, [], skipped=True)
    rollouts = []
    for q in world.train:
        g = run_group(policy, world.corpus, q, max(2, config.stage1_samples), config.gen, seed=config.seed,
                      max_retrievals=config.max_retrievals, k=config.retrieval_k, tags=config.tagset)
        rollouts += g.rollouts
    samples = rejection_filter(rollouts, world.golden)
    losses: list[float] = []
    try:
        if not samples:
            raise EmptyColdStartSet("no rollout passed the cold-start filter")
        policy, losses = run_sft(policy, samples, config.sft_epochs, config.sft_batch_size, config.sft_lr,
                                 seed=config.seed)
    except EmptyColdStartSet as e:
        log.warning("%s; continuing with the seeded policy", e)
    ck = Checkpoint(policy.weights.copy(), 0, rng_state, {}, policy.weights.copy(), "stage1")
    if save:
        out = Path(config.out_dir)
        ck.save(out / "stage1")
        save_records(samples, out / "stage1" / "sft.jsonl")
        (out / "stage1" / "sft_loss.json").write_text(json.dumps(losses))
    return Stage1Result(ck, len(samples), losses)


def _write_log(path: Path, records, mode="w"):
    with open(path, mode, encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def read_dynamics(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def rl_step(policy: ToyPolicy, ref: ToyPolicy, world: World, config: RunConfig, step: int,
            rng: np.random.Generator, memory: dict, rewriter: RewriterConfig):
    """One Stage-2 iteration; returns (new policy, record, memory)."""
    qs = [world.train[i] for i in sorted(rng.choice(len(world.train), config.questions_per_step, replace=False))]
    groups, totals = [], []
    correct = []
    for q in qs:
        g = run_group(policy, world.corpus, q, config.G, config.gen, seed=config.seed * 1_000_003 + step,
                      max_retrievals=config.max_retrievals, k=config.retrieval_k, tags=config.tagset)
        scores = score_group(g, q.answer, config.eta, not config.no_group_reward, config.sigma_over)
        groups.append(g)
        totals += [s.total for s in scores]
        correct += [answer_reward(r, q.answer) for r in g.rollouts]
    batch = [r for g in groups for r in g.rollouts]
    # memory is built in every arm so the ablation can be audited; only its use is switched off
    memory = build_memory_dataset(groups, world.golden, rewriter, existing=memory)
    mem_batch = []
    if not config.no_memorization and memory:
        keys = sorted(memory)
        take = min(config.memory_batch, len(keys))
        mem_batch = [memory[keys[i]] for i in sorted(rng.choice(len(keys), take, replace=False))]
    attach_logprobs(batch, policy, ref)
    kls = [token_kl(r) for r in batch]
    try:
        adv = advantages(totals, kls, [r.mask for r in batch], config.beta)
    except DegenerateBatch:
        adv = None
    hp = config.hyper
    if config.no_memorization:
        hp.mu = 0.0
    new, report = combined_step(policy, batch if adv is not None else [], adv, mem_batch, hp)
    record = {
        "step": step,
        "reward_mean": float(np.mean(totals)),
        "rc_mean": float(np.mean([r.retrieval_count for r in batch])),
        "accuracy": float(np.mean(correct)),
        "format_ok": float(np.mean([r.format_ok for r in batch])),
        "j_mask": report.j_mask,
        "l_m": report.l_m,
        "total": report.total,
        "grad_norm": report.grad_norm,
        "memory_size": len(memory),
        "degenerate": adv is None,
    }
    return new, record, memory


@dataclass
class Stage2Result:
    checkpoint: Checkpoint
    dynamics: list[dict]


def run_stage2(config: RunConfig, start: Checkpoint, world: World | None = None, save: bool = True,
               stop_at: int | None = None) -> Stage2Result:
    """Run RL steps ``start.step`` .. ``config.rl_steps`` (or ``stop_at``), checkpointing every c steps."""
    world = world or build_world(config)
    out = Path(config.out_dir)
    policy = policy_from(start.weights, world, config)
    ref_w = start.ref_weights if start.ref_weights is not None else start.weights
    ref = policy_from(ref_w, world, config)
    rng = np.random.default_rng()
    rng.bit_generator.state = start.rng_state
    memory = dict(start.memory)
    rewriter = RewriterConfig(fact_fn=fact_of_document, tags=config.tagset)
    log_path = out / "dynamics.jsonl"
    if save:
        out.mkdir(parents=True, exist_ok=True)
        if start.step == 0:
            (out / "run.log").write_text(config.echo() + "\n")
            _write_log(log_path, [])
        elif log_path.exists():
            # drop records past the checkpoint so a resume rewrites them identically
            _write_log(log_path, [r for r in read_dynamics(log_path) if r["step"] < start.step])
    end = config.rl_steps if stop_at is None else min(stop_at, config.rl_steps)
    dynamics = []
    last_good = start
    for step in range(start.step, end):
        try:
            policy, rec, memory = rl_step(policy, ref, world, config, step, rng, memory, rewriter)
        except NonFiniteLoss:
            log.error("non-finite loss at step %d; keeping checkpoint at step %d", step, last_good.step)
            if save:
                last_good.save(out / "last_good")
            raise
        dynamics.append(rec)
        if save:
            _write_log(log_path, [rec], "a")
        if (step + 1) % config.checkpoint_every == 0 or step + 1 == end:
            last_good = Checkpoint(policy.weights.copy(), step + 1, rng.bit_generator.state, dict(memory),
                                   ref.weights.copy())
            if save:
                last_good.save(out / f"step{step + 1:04d}")
                last_good.save(out / "latest")
    final = Checkpoint(policy.weights.copy(), end, rng.bit_generator.state, dict(memory), ref.weights.copy())
    return Stage2Result(final, dynamics)
