import numpy as np
import pytest

import _support as S
from searchrl.grammar import SegmentKind
from searchrl.policy import (EOS, GenParams, ScriptedPolicy, ToyPolicy, UnknownToken, Vocabulary, segment_kind)


def test_distribution_normalizes():
    rng = np.random.default_rng(0)
    p = S.policy(rng, scale=3.0)
    for _ in range(20):
        toks, _ = S.trace(rng)
        logd = p.log_distribution(toks[: rng.integers(0, len(toks))])
        assert abs(np.exp(logd).sum() - 1) < 1e-12


def test_grad_logprob_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(25):
        p = S.policy(rng)
        toks, _ = S.trace(rng)
        cut = int(rng.integers(0, len(toks)))
        ctx, tok = toks[:cut], toks[cut]

        def f(W):
            return ToyPolicy(p.vocab, p.window, W).logprob(ctx, tok)

        assert S.directional_check(f, p.grad_logprob(ctx, tok), p.weights, rng) < 1e-5


def test_grad_coordinatewise():
    rng = np.random.default_rng(2)
    p = S.policy(rng)
    ctx, tok = ["a", "b", S.T.internal_open], "c"
    g = p.grad_logprob(ctx, tok)
    h = 1e-6
    for i, j in [(p.vocab.id("c"), p.vocab.id(S.T.internal_open)), (0, p.feature_dim - 1), (3, 5)]:
        W = p.weights.copy()
        W[i, j] += h
        up = ToyPolicy(p.vocab, p.window, W).logprob(ctx, tok)
        W[i, j] -= 2 * h
        down = ToyPolicy(p.vocab, p.window, W).logprob(ctx, tok)
        assert abs((up - down) / (2 * h) - g[i, j]) < 1e-7


def test_sequence_logprobs_masked_positions_are_zero():
    rng = np.random.default_rng(3)
    p = S.policy(rng)
    toks, mask = S.trace(rng)
    lp = p.sequence_logprobs(["a"], toks, mask)
    full = p.sequence_logprobs(["a"], toks)
    assert np.all(lp[np.asarray(mask) == 0] == 0)
    assert np.allclose(lp[np.asarray(mask) == 1], full[np.asarray(mask) == 1])


def test_features_depend_only_on_window():
    rng = np.random.default_rng(4)
    p = S.policy(rng)
    a = ["a", "b", "c", "d", "e"]
    b = ["f", "f", "c", "d", "e"]
    assert np.array_equal(p.features(a), p.features(b))
    assert not np.array_equal(p.features(a), p.features(["a", "b", "c", "d", "f"]))


def test_unknown_context_token_uses_unk_but_unknown_target_raises():
    p = S.policy(np.random.default_rng(5))
    p.log_distribution(["never", "seen"])
    with pytest.raises(UnknownToken):
        p.logprob(["a"], "never")


def test_segment_kind_tracking():
    T = S.T
    assert segment_kind([], T) is SegmentKind.THINK
    assert segment_kind(["a", T.external_open, "b"], T) is SegmentKind.EXTERNAL_QUERY
    assert segment_kind([T.document_open, "x"], T) is SegmentKind.DOCUMENT
    assert segment_kind([T.document_open, "x", T.document_close], T) is SegmentKind.THINK
    assert segment_kind([T.answer_open], T) is SegmentKind.FINAL_ANSWER


def test_sampling_is_seeded_and_stops():
    p = S.policy(np.random.default_rng(6))
    gen = GenParams()
    stops = {S.T.internal_close}
    a = p.sample_segment(["a"], [], gen, np.random.default_rng(9), stops)
    b = p.sample_segment(["a"], [], gen, np.random.default_rng(9), stops)
    assert a.tokens == b.tokens
    assert a.capped or a.tokens[-1] in stops
    assert len(a.tokens) == len(a.logps)


def test_greedy_and_forbidden():
    p = S.policy(np.random.default_rng(7))
    logd = p.log_distribution(["a"])
    best = p.vocab.tokens[int(np.argmax(logd))]
    s = p.sample_segment(["a"], [], GenParams(greedy=True, segment_cap=1), None, set())
    assert s.tokens == [best]
    s = p.sample_segment(["a"], [], GenParams(greedy=True, segment_cap=1), None, set(), {best})
    assert s.tokens != [best]


def test_top_p_keeps_nucleus():
    p = S.policy(np.random.default_rng(8), scale=4.0)
    logd = p.log_distribution(["a"])
    top = p.vocab.tokens[int(np.argmax(logd))]
    rng = np.random.default_rng(0)
    draws = {p.sample_segment(["a"], [], GenParams(top_p=1e-9, segment_cap=1), rng, set()).tokens[0]
             for _ in range(20)}
    assert draws == {top}


def test_gen_params_validation():
    with pytest.raises(ValueError):
        GenParams(temperature=0)
    with pytest.raises(ValueError):
        GenParams(top_p=0)
    GenParams(temperature=0, greedy=True)


def test_vocabulary_validation():
    with pytest.raises(ValueError):
        Vocabulary(["a", "a", "b", "c", "d", "e", "f", "g"])
    v = Vocabulary(["a"])
    assert EOS in v and len(v) >= 8


def test_weight_shape_checked():
    v = Vocabulary(S.WORDS)
    with pytest.raises(ValueError):
        ToyPolicy(v, 3, np.zeros((2, 2)))


def test_scripted_policy_replays():
    T = S.T
    script = ["a", T.external_open, "b", T.external_close, T.answer_open, "c", T.answer_close]
    sp = ScriptedPolicy(script)
    seg = sp.sample_segment(["q"], [], GenParams(), None, {T.external_close, T.answer_close})
    assert seg.tokens == script[:4]
