import json

import numpy as np
import pytest

from searchrl.policy import ToyPolicy
from searchrl.rewards import answer_reward
from searchrl.rollout import run_rollout
from searchrl.world import (ConvergenceFailure, InfeasibleConfig, generate_world, load_questions, mention,
                            oracle_policy, recall_probe, seed_internal_knowledge)

SMALL = dict(n_entities=60, n_facts=50, n_eval=8)


@pytest.fixture(scope="module")
def world():
    return generate_world(seed=3, **SMALL)


def test_deterministic():
    assert generate_world(seed=3, **SMALL).digest() == generate_world(seed=3, **SMALL).digest()
    assert generate_world(seed=4, **SMALL).digest() != generate_world(seed=3, **SMALL).digest()


def test_layout(world):
    people, orgs, cities = world.graph.layers
    assert len(world.graph.facts) == 50 and len(world.graph.entities) == 60
    assert len(world.questions) == len(people)
    assert len(world.eval) == 8 and len(world.train) == len(people) - 8
    assert {f.object for f in world.graph.facts if f.subject in people} == set(orgs)
    assert {f.object for f in world.graph.facts if f.subject in orgs} == set(cities)


def test_corpus_holds_exactly_the_external_facts(world):
    ext = world.graph.external()
    assert len(world.corpus) == len(ext)
    for f in ext:
        p = world.corpus.passages[f"p{f.id}"]
        assert p.title == f.subject and p.text == f"{f.subject} {f.relation} {mention(f.object)}"
    for f in world.graph.internal():
        assert f"p{f.id}" not in world.corpus.passages


def test_questions_compose_two_hops(world):
    for q in world.questions:
        f1, f2 = world.fact(q.hops[0]), world.fact(q.hops[1])
        assert f1.object == f2.subject and q.answer == f2.object
        assert q.channels == (f1.channel, f2.channel)
        assert q.question == f"{f2.relation} of {f1.relation} of {mention(f1.subject)}"


@pytest.mark.parametrize("frac, want", [(1.0, "internal"), (0.0, "external")])
def test_extreme_fractions(frac, want):
    w = generate_world(seed=0, internal_fraction=frac, **SMALL)
    assert {f.channel for f in w.graph.facts} == {want}
    assert len(w.corpus) == (0 if frac == 1.0 else 50)


def test_oracle_solvability(world):
    pol = oracle_policy(world)
    for q in world.questions:
        r = run_rollout(pol, world.corpus, q, k=1)
        assert r.format_ok and answer_reward(r, q.answer) == 1
        assert r.retrieval_count == q.channels.count("external")


def test_channel_soundness(world):
    pol = oracle_policy(world, internal_only=True)
    for q in world.questions:
        r = run_rollout(pol, world.corpus, q, k=1)
        assert r.retrieval_count == 0
        assert (answer_reward(r, q.answer) == 1) == (q.channels == ("internal", "internal"))


def test_distractors_sort_after_fact_passages():
    w = generate_world(seed=1, n_distractors=5, **SMALL)
    ids = sorted(w.corpus.passages)
    assert sum(i.startswith("px") for i in ids) == 5
    assert ids[-5:] == sorted(i for i in ids if i.startswith("px"))


@pytest.mark.parametrize("kw", [dict(n_entities=10, n_facts=10), dict(n_entities=60, n_facts=50, n_eval=40),
                                dict(internal_fraction=1.5), dict(n_entities=60, n_facts=20)])
def test_infeasible(kw):
    with pytest.raises(InfeasibleConfig):
        generate_world(**{**SMALL, **kw})


def test_dump_and_reload(world, tmp_path):
    world.dump(tmp_path)
    qs = load_questions(tmp_path / "qa.jsonl")
    assert [q.to_record() for q in qs] == [q.to_record() for q in world.questions]
    rec = json.loads((tmp_path / "corpus.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"id", "title", "contents"}


def _fresh(world):
    return ToyPolicy(world.vocabulary(), 4)


def test_seeding_learns_internal_facts_only():
    w = generate_world(seed=5, n_entities=30, n_facts=20, n_eval=2)
    assert len(w.graph.internal()) == 10
    pol = seed_internal_knowledge(_fresh(w), w.graph, lr=20.0, seed=0)
    acc, _ = recall_probe(pol, w.graph.internal(), held_out=True)
    assert acc >= 0.9
    ext_acc, _ = recall_probe(pol, w.graph.external(), held_out=True)
    assert ext_acc <= 0.2


def test_seeding_empty_channel_is_identity():
    w = generate_world(seed=5, n_entities=30, n_facts=20, n_eval=2, internal_fraction=0.0)
    pol = _fresh(w)
    out = seed_internal_knowledge(pol, w.graph)
    assert np.array_equal(out.weights, pol.weights)


def test_seeding_convergence_failure():
    w = generate_world(seed=5, n_entities=30, n_facts=20, n_eval=2)
    with pytest.raises(ConvergenceFailure):
        seed_internal_knowledge(_fresh(w), w.graph, lr=1e-6, max_epochs=2)
