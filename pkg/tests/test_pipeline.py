import json

import numpy as np
import pytest

from searchrl import pipeline
from searchrl.cli import main
from searchrl.config import RunConfig
from searchrl.experiments import memory_facts, sign_test
from searchrl.knowledge import NonFiniteLoss
from searchrl.pipeline import (Checkpoint, build_world, read_dynamics, run_stage1, run_stage2, seeded_policy)
from searchrl.policy import ScriptedPolicy

SMALL = dict(n_entities=60, n_facts=50, n_eval=8, G=4, questions_per_step=2, rl_steps=6, checkpoint_every=2,
             stage1_samples=4)


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    return RunConfig(out_dir=str(tmp_path_factory.mktemp("run")), **SMALL)


@pytest.fixture(scope="module")
def stage1(cfg):
    return run_stage1(cfg, save=True)


def test_stage1_builds_a_cold_start_set(cfg, stage1):
    assert stage1.n_samples > 0 and not stage1.skipped
    assert stage1.losses[-1] < stage1.losses[0]
    back = Checkpoint.load(f"{cfg.out_dir}/stage1")
    assert np.array_equal(back.weights, stage1.checkpoint.weights)
    assert json.loads(open(f"{cfg.out_dir}/stage1/sft_loss.json").read()) == stage1.losses


def test_no_stage1_returns_seeded_policy(cfg):
    c = cfg.replace(no_stage1=True)
    res = run_stage1(c, save=False)
    assert res.skipped
    assert np.array_equal(res.checkpoint.weights, seeded_policy(c).weights)


def test_empty_cold_start_set_proceeds(cfg, caplog):
    base = seeded_policy(cfg)
    base_w = base.weights.copy()

    class Adversary(type(base)):
        def sample_segment(self, prompt, partial, gen, rng, stop_tokens, forbidden=frozenset()):
            return ScriptedPolicy([self.tags.answer_open, "@Nobody", self.tags.answer_close],
                                  self.tags).sample_segment(prompt, partial, gen, rng, stop_tokens, forbidden)

    adv = Adversary(base.vocab, base.window, base.weights)
    res = run_stage1(cfg, policy=adv, save=False)
    assert res.n_samples == 0 and np.array_equal(res.checkpoint.weights, base_w)
    assert "no rollout passed" in caplog.text


def test_zero_steps_is_identity(cfg, stage1):
    res = run_stage2(cfg.replace(rl_steps=0), stage1.checkpoint, save=False)
    assert res.dynamics == [] and np.array_equal(res.checkpoint.weights, stage1.checkpoint.weights)


def test_resume_equivalence(cfg, stage1, tmp_path):
    a = cfg.replace(out_dir=str(tmp_path / "a"))
    b = cfg.replace(out_dir=str(tmp_path / "b"))
    full = run_stage2(a, stage1.checkpoint)
    run_stage2(b, stage1.checkpoint, stop_at=5)
    # resume from the step-4 checkpoint; step 4 was logged past it and must be rewritten
    resumed = run_stage2(b, Checkpoint.load(tmp_path / "b" / "step0004"))
    assert (tmp_path / "a" / "dynamics.jsonl").read_bytes() == (tmp_path / "b" / "dynamics.jsonl").read_bytes()
    assert np.array_equal(full.checkpoint.weights, resumed.checkpoint.weights)
    assert full.checkpoint.memory == resumed.checkpoint.memory
    recs = read_dynamics(tmp_path / "a" / "dynamics.jsonl")
    assert [r["step"] for r in recs] == list(range(6))
    assert {"step", "reward_mean", "rc_mean", "j_mask", "l_m"} <= set(recs[0])
    assert "mu = 0.1" in (tmp_path / "a" / "run.log").read_text()


def test_same_seed_same_log(cfg, stage1):
    a = run_stage2(cfg, stage1.checkpoint, save=False)
    b = run_stage2(cfg, stage1.checkpoint, save=False)
    assert a.dynamics == b.dynamics


def test_no_memorization_still_records_memory_but_skips_loss(cfg, stage1):
    res = run_stage2(cfg.replace(no_memorization=True), stage1.checkpoint, save=False)
    assert all(r["l_m"] == 0 for r in res.dynamics)
    full = run_stage2(cfg, stage1.checkpoint, save=False)
    assert full.dynamics[0]["memory_size"] == res.dynamics[0]["memory_size"]


def test_ablation_isolation_before_first_memory_batch(cfg, stage1):
    # with an empty memory at step 0 the first update cannot depend on the flag
    c = cfg.replace(rl_steps=1)
    world = build_world(c)
    ck = stage1.checkpoint
    a = run_stage2(c, ck, world, save=False)
    b = run_stage2(c.replace(no_memorization=True), ck, world, save=False)
    if a.dynamics[0]["memory_size"] == 0:
        assert np.array_equal(a.checkpoint.weights, b.checkpoint.weights)
    assert a.dynamics[0]["rc_mean"] == b.dynamics[0]["rc_mean"]


def test_non_finite_loss_keeps_last_good(cfg, stage1, tmp_path):
    c = cfg.replace(out_dir=str(tmp_path), learning_rate=float("inf"))
    with pytest.raises(NonFiniteLoss):
        run_stage2(c, stage1.checkpoint)
    back = Checkpoint.load(tmp_path / "last_good")
    assert back.step in (0, 1) and np.isfinite(back.weights).all()


def test_memory_facts_and_sign_test(cfg, stage1):
    res = run_stage2(cfg, stage1.checkpoint, save=False)
    world = build_world(cfg)
    for fid in memory_facts(world, res.checkpoint.memory):
        assert world.fact(fid).channel == "external"
    assert sign_test([1, 1, 1, 1, 1]) == (5, 0, 0.0625)
    assert sign_test([0, 0]) == (0, 0, 1.0)
    assert sign_test([1, -1])[2] == 1.0


def test_cli_end_to_end(tmp_path, capsys):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("\n".join(f"{k} = {v}" for k, v in {**SMALL, "rl_steps": 2}.items()))
    out = str(tmp_path / "o")
    base = ["--config", str(cfgfile), "--out", out]
    assert main(base + ["world-gen"]) == 0
    assert main(base + ["sft"]) == 0
    assert main(base + ["rl"]) == 0
    assert main(base + ["eval"]) == 0
    assert "LasJ" in capsys.readouterr().out
    assert main(base + ["rollout", "--n", "2", "--question", "q0000"]) == 0
    assert main(base + ["score", "--rollouts", f"{out}/rollouts.jsonl"]) == 0
    scores = [json.loads(x) for x in open(f"{out}/scores.jsonl")]
    assert len(scores) == 2 and all(s["total"] == s["r_format"] + s["r_answer"] + s["r_group"] for s in scores)
    assert main(base + ["ingest", "--corpus", f"{out}/corpus.jsonl"]) == 0
    assert main(["--config", str(tmp_path / "missing.cfg"), "sft"]) == 2


def test_world_cache_is_keyed_on_params():
    a = build_world(RunConfig(**{k: SMALL[k] for k in ("n_entities", "n_facts", "n_eval")}))
    b = build_world(RunConfig(seed=1, **{k: SMALL[k] for k in ("n_entities", "n_facts", "n_eval")}))
    assert a.digest() != b.digest()
    assert len(pipeline._WORLDS) >= 2
