import numpy as np
import pytest

import _support as S
from searchrl.corpus import Corpus, Passage
from searchrl.grammar import LONG_TAGS as T
from searchrl.knowledge import (MemorySample, RewriteFailed, RewriterConfig, SFTSample, batch_sft_loss,
                                build_memory_dataset, extract_documents, load_memory, load_sft, make_memory_sample,
                                mask_from_rle, mask_rle, memorization_loss, passages_in, rejection_filter, rewrite,
                                run_sft, save_records, sft_loss)
from searchrl.policy import ScriptedPolicy, ToyPolicy
from searchrl.rollout import run_group
from searchrl.world import QAExample

CORPUS = Corpus.from_passages([Passage("1", "Voli", "Voli founded @Acme"), Passage("2", "Acme", "Acme based_in @Tar")])
Q = QAExample("q1", "based_in of founded of @Voli", "Tar", ("f1", "f2"), ("external", "external"), "train")


def scripted(*segments):
    return ScriptedPolicy([t for seg in segments for t in seg])


def search(q):
    return [T.external_open, *q.split(), T.external_close]


def answer(a):
    return [T.answer_open, a, T.answer_close]


def internal(x):
    return [T.internal_open, *x.split(), T.internal_close]


def group(policy, G=2):
    return run_group(policy, CORPUS, Q, G, k=1)


def test_rejection_filter():
    both = group(scripted(internal("@Acme"), search("Acme"), answer("@Tar")))
    only_ext = group(scripted(search("Voli"), search("Acme"), answer("@Tar")))
    wrong = group(scripted(internal("@Acme"), search("Acme"), answer("@Nope")))
    kept = rejection_filter(both.rollouts + only_ext.rollouts + wrong.rollouts, {"q1": "Tar"})
    assert len(kept) == 2
    s = kept[0]
    assert s.source_id == "q1/0"
    assert s.mask == [int(m) for m in both.rollouts[0].mask]
    assert 0 in s.mask


def test_sft_gradient_and_masking():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pol = S.policy(rng)
        s = S.sft_sample(rng)

        def f(W):
            return sft_loss(ToyPolicy(pol.vocab, pol.window, W), s, with_grad=False)[0]

        loss, g = sft_loss(pol, s)
        assert S.directional_check(f, g, pol.weights, rng) < 1e-5
        # noise on document-position log-probs leaves loss and gradient unchanged
        loss2, g2 = sft_loss(S.PerturbedPolicy(pol, rng), s)
        assert loss2 == loss and np.array_equal(g2, g)


def test_batch_sft_loss_is_mean():
    rng = np.random.default_rng(0)
    pol = S.policy(rng)
    ss = [S.sft_sample(rng) for _ in range(3)]
    total, g = batch_sft_loss(pol, ss)
    parts = [sft_loss(pol, s) for s in ss]
    assert total == pytest.approx(np.mean([p[0] for p in parts]))
    assert np.allclose(g, sum(p[1] for p in parts) / 3)


def test_run_sft_decreases_loss():
    rng = np.random.default_rng(1)
    pol = S.policy(rng)
    ss = [S.sft_sample(rng) for _ in range(8)]
    trained, losses = run_sft(pol, ss, epochs=5, batch_size=4, lr=2.0)
    assert losses[-1] < losses[0]
    assert not np.array_equal(trained.weights, pol.weights)
    with pytest.raises(ValueError):
        run_sft(pol, [])


def test_sft_sample_validation():
    with pytest.raises(ValueError):
        SFTSample("q", ["a"], [1, 0])
    with pytest.raises(ValueError):
        SFTSample("q", ["a"], [0])


def test_memorization_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pol = S.policy(rng)
        ms = [S.memory_sample(rng, i) for i in range(3)]

        def f(W):
            return memorization_loss(ToyPolicy(pol.vocab, pol.window, W), ms, with_grad=False)[0]

        _, g = memorization_loss(pol, ms)
        assert S.directional_check(f, g, pol.weights, rng) < 1e-5


def test_extract_and_rewrite():
    g = group(scripted(internal("@Acme"), search("Acme"), answer("@Tar")))
    r = g.rollouts[0]
    docs = extract_documents(r)
    assert docs == [("Acme", "(1) Acme — Acme based_in @Tar")]
    assert passages_in(docs[0][1]) == [("Acme", "Acme based_in @Tar")]
    text = rewrite(RewriterConfig(), r.question, docs, skeleton=r.trace)
    assert T.external_open not in text and "based_in @Tar" in text
    m = make_memory_sample("q1", r.question, text, "Tar")
    assert m.tokens[-3:] == answer("@Tar")


def test_rewrite_without_skeleton():
    text = rewrite(RewriterConfig(), "q", [("a", "(1) a — says x")], answer="x")
    assert text == f"{T.internal_open} says x {T.internal_close} {T.answer_open} x {T.answer_close}"
    with pytest.raises(ValueError):
        rewrite(RewriterConfig(), "q", [])


@pytest.mark.parametrize("text", [
    f"{T.answer_open} wrong {T.answer_close}",
    f"{T.external_open} a {T.external_close} {T.document_open} b {T.document_close} {T.answer_open} x {T.answer_close}",
    f"{T.internal_open} x",
])
def test_make_memory_sample_rejects(text):
    with pytest.raises(RewriteFailed):
        make_memory_sample("q", "q", text, "x")


def test_memory_dataset_keeps_shortest_and_skips_internal_only():
    long_ = group(scripted(["hmm", "well"], search("Voli"), search("Acme"), answer("@Tar")))
    short = group(scripted(internal("@Acme"), search("Acme"), answer("@Tar")))
    short.rollouts = [type(r)(**{**r.__dict__, "index": r.index + 5}) for r in short.rollouts]
    no_search = group(scripted(internal("@Acme"), internal("@Tar"), answer("@Tar")))
    long_.rollouts += short.rollouts + no_search.rollouts
    mem = build_memory_dataset([long_], {"q1": "Tar"}, RewriterConfig())
    assert list(mem) == ["q1"]
    assert mem["q1"].provenance == "q1/5"
    # existing shorter entries survive
    tiny = MemorySample("q1", Q.question, answer("@Tar"), "seed")
    again = build_memory_dataset([long_], {"q1": "Tar"}, RewriterConfig(), existing={"q1": tiny})
    assert again["q1"] is tiny


def test_records_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ss = [S.sft_sample(rng) for _ in range(3)]
    save_records(ss, tmp_path / "s.jsonl")
    back = load_sft(tmp_path / "s.jsonl")
    assert [(s.tokens, s.mask) for s in back] == [(s.tokens, s.mask) for s in ss]
    ms = [S.memory_sample(rng, i) for i in range(3)]
    save_records(ms, tmp_path / "m.jsonl")
    assert load_memory(tmp_path / "m.jsonl") == {m.question_id: m for m in ms}


def test_mask_rle():
    m = [1, 1, 0, 0, 0, 1]
    assert mask_rle(m) == [[1, 2], [0, 3], [1, 1]]
    assert mask_from_rle(mask_rle(m)) == m
