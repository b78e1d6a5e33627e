import pytest

from searchrl.config import ConfigError, RunConfig, load_config, parse_config
from searchrl.grammar import LONG_TAGS
from searchrl.prompts import (GENERATION_SYSTEM_PROMPT, JUDGE_PROMPT, REWRITE_SYSTEM_PROMPT, fill_generation,
                              fill_judge, fill_rewrite)


def test_judge_prompt_fill_is_literal():
    out = fill_judge("Q {} x", "G", "P\\boxed{y}")
    assert out.startswith("Given a Question and its Golden Answer")
    assert out.endswith("Question: Q {} x\n\nGolden Answer: G\n\nPredicted Answer: P\\boxed{y}")
    assert JUDGE_PROMPT.count("{}") == 3


def test_generation_prompt_mentions_the_long_tags():
    for tag in (LONG_TAGS.internal_open, LONG_TAGS.external_close, LONG_TAGS.document_open):
        assert tag in GENERATION_SYSTEM_PROMPT
    assert fill_generation("Who?").endswith("Question:\nWho?")


def test_rewrite_prompt():
    out = fill_rewrite("doc {x}", "Why?")
    assert "Activated Knowledge Matrix:\ndoc {x}\n" in out and out.endswith("Question:\nWhy?")
    assert "{document}" not in out and "{document}" in REWRITE_SYSTEM_PROMPT


def test_parse_config_types_and_comments():
    cfg = parse_config("""
        # a comment
        seed = 7
        mu = 0.5   # trailing
        no_memorization = yes
        tags = "short"
    """)
    assert (cfg.seed, cfg.mu, cfg.no_memorization, cfg.tags) == (7, 0.5, True, "short")
    assert cfg.tagset.external_open == "<external>"


@pytest.mark.parametrize("text", ["bogus = 1", "seed = x", "no_stage1 = maybe", "just words", "tags = medium",
                                  "G = 1", "sigma_over = some"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_echo_roundtrip(tmp_path):
    cfg = RunConfig(seed=3, beta=1e-3, no_group_reward=True, out_dir="x/y")
    path = tmp_path / "c.cfg"
    path.write_text(cfg.echo())
    assert load_config(path) == cfg
    assert load_config(path, seed=9, out_dir=None).seed == 9


def test_derived_views():
    cfg = RunConfig(mu=0.2, temperature=0.5)
    assert cfg.hyper.mu == 0.2 and cfg.gen.temperature == 0.5 and cfg.gen.top_p == 0.95
    assert cfg.world_params["n_facts"] == cfg.n_facts
    assert cfg.replace(seed=1).seed == 1 and cfg.seed == 0
