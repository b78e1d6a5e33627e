"""Command-line entry point: ``searchrl <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .corpus import CorpusError, ingest
from .evaluation import JudgeConfig, evaluate
from .pipeline import Checkpoint, build_world, policy_from, run_stage1, run_stage2, seeded_policy
from .remote import RemotePolicy, RemotePolicyConfig
from .rewards import score_group
from .rollout import RolloutGroup, dump_rollouts, load_rollouts, run_group
from .world import load_questions

log = logging.getLogger("searchrl")


def _checkpoint_dir(out: Path, explicit: str | None) -> Path | None:
    if explicit:
        return Path(explicit)
    for name in ("latest", "stage1"):
        if (out / name / "weights.npz").exists():
            return out / name
    return None


def _policy(args, cfg, world):
    if getattr(args, "remote", False):
        rc = RemotePolicyConfig.from_env()
        if rc is None:
            raise SystemExit("--remote needs SEARCHRL_POLICY_URL")
        return RemotePolicy(rc, cfg.tagset)
    path = _checkpoint_dir(Path(cfg.out_dir), getattr(args, "checkpoint", None))
    if path is None:
        log.info("no checkpoint found; using the seeded base policy")
        return seeded_policy(cfg, world)
    log.info("loading policy from %s", path)
    return policy_from(Checkpoint.load(path, cfg.tagset).weights, world, cfg)


def cmd_world_gen(args, cfg):
    world = build_world(cfg)
    world.dump(cfg.out_dir)
    print(f"world {world.digest()[:12]}: {len(world.graph.facts)} facts, {len(world.corpus)} passages, "
          f"{len(world.train)} train / {len(world.eval)} eval questions -> {cfg.out_dir}")


def cmd_ingest(args, cfg):
    corpus = ingest(args.corpus)
    out = Path(args.index or Path(cfg.out_dir) / "index.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.dump(out)
    print(f"{len(corpus)} passages -> {out}")


def cmd_sft(args, cfg):
    res = run_stage1(cfg, save=True)
    if res.skipped:
        print("stage 1 skipped (no_stage1)")
    else:
        tail = f", final loss {res.losses[-1]:.4f}" if res.losses else ""
        print(f"stage 1: {res.n_samples} cold-start samples{tail}")


def cmd_rl(args, cfg):
    out = Path(cfg.out_dir)
    src = Path(args.resume) if args.resume else out / "stage1"
    if not (src / "weights.npz").exists():
        log.info("no checkpoint at %s; running stage 1 first", src)
        start = run_stage1(cfg, save=True).checkpoint
    else:
        start = Checkpoint.load(src, cfg.tagset)
    res = run_stage2(cfg, start, save=True, stop_at=args.stop_at)
    for r in res.dynamics[-3:]:
        print(json.dumps({k: r[k] for k in ("step", "reward_mean", "rc_mean", "j_mask", "l_m")}))
    print(f"stage 2 finished at step {res.checkpoint.step} -> {out / 'latest'}")


def cmd_eval(args, cfg):
    world = build_world(cfg)
    questions = load_questions(args.qa) if args.qa else (world.train if args.split == "train" else world.eval)
    policy = _policy(args, cfg, world)
    jr = RemotePolicyConfig.from_env("SEARCHRL_JUDGE")
    judge = JudgeConfig("remote", jr) if jr else JudgeConfig()
    rep = evaluate(policy, world.corpus, questions, cfg.gen, judge, k=cfg.retrieval_k, tags=cfg.tagset,
                   max_retrievals=cfg.max_retrievals)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / f"eval_{args.split}.jsonl")
    print(rep.table())


def cmd_rollout(args, cfg):
    world = build_world(cfg)
    qs = world.train if args.split == "train" else world.eval
    if args.question:
        qs = [q for q in world.questions if q.id in set(args.question)]
        if not qs:
            raise SystemExit(f"unknown question id(s): {args.question}")
    policy = _policy(args, cfg, world)
    rollouts = []
    for q in qs:
        g = run_group(policy, world.corpus, q, args.G or cfg.G, cfg.gen, seed=cfg.seed,
                      max_retrievals=cfg.max_retrievals, k=cfg.retrieval_k, tags=cfg.tagset)
        rollouts += g.rollouts
    path = Path(args.rollouts or Path(cfg.out_dir) / "rollouts.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_rollouts(rollouts, path)
    print(f"{len(rollouts)} rollouts over {len(qs)} questions -> {path}")


def _load_golden(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[str(rec.get("id", rec.get("question_id")))] = rec["answer"]
    return out


def cmd_score(args, cfg):
    rollouts = load_rollouts(args.rollouts, cfg.tagset)
    golden = _load_golden(args.qa) if args.qa else build_world(cfg).golden
    groups: dict[str, RolloutGroup] = {}
    for r in rollouts:
        groups.setdefault(r.question_id, RolloutGroup(r.question_id, r.question)).rollouts.append(r)
    path = Path(args.scores or Path(cfg.out_dir) / "scores.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for qid, g in groups.items():
            if qid not in golden:
                raise SystemExit(f"no golden answer for {qid}")
            scores = score_group(g, golden[qid], cfg.eta, not cfg.no_group_reward, cfg.sigma_over)
            for r, s in zip(g.rollouts, scores):
                rec = {"question_id": qid, "index": r.index, "retrieval_count": r.retrieval_count, **s.to_record()}
                f.write(json.dumps(rec) + "\n")
                n += 1
    print(f"{n} scores -> {path}")


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="searchrl", parents=[common],
                                description="Train and evaluate retrieval-aware toy policies.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, text):
        return sub.add_parser(name, help=text, parents=[common])

    add("world-gen", "generate the synthetic world and write corpus/qa/graph files")

    s = add("ingest", "load a JSONL corpus and write a normalized index")
    s.add_argument("--corpus", required=True)
    s.add_argument("--index", help="index path (default: <out>/index.jsonl)")

    add("sft", "stage 1: rejection sampling and masked SFT")

    s = add("rl", "stage 2: RL with group reward and memorization")
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--stop-at", type=int, help="stop after this step index")

    for name, text in (("eval", "greedy evaluation: F1, judge accuracy, retrieval count"),
                       ("rollout", "sample rollout groups and dump them as JSONL")):
        s = add(name, text)
        s.add_argument("--checkpoint", help="checkpoint directory (default: latest, then stage1)")
        s.add_argument("--split", choices=("train", "eval"), default="eval" if name == "eval" else "train")
        s.add_argument("--remote", action="store_true", help="sample from SEARCHRL_POLICY_URL instead")
        if name == "eval":
            s.add_argument("--qa", help="QA JSONL file instead of the world's split")
        else:
            s.add_argument("--question", action="append", help="question id (repeatable)")
            s.add_argument("-G", "--n", dest="G", type=int, help="rollouts per question")
            s.add_argument("--rollouts", "--dump", dest="rollouts", help="output path")

    s = add("score", "score a rollout dump with format, answer and group rewards")
    s.add_argument("--rollouts", required=True)
    s.add_argument("--qa", "--golden", dest="qa",
                   help="JSONL with id and answer fields (default: the world's questions)")
    s.add_argument("--scores", help="output path")
    return p


COMMANDS = {"world-gen": cmd_world_gen, "ingest": cmd_ingest, "sft": cmd_sft, "rl": cmd_rl,
            "eval": cmd_eval, "rollout": cmd_rollout, "score": cmd_score}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, CorpusError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
