"""Run configuration: flat ``key = value`` text with typed parsing."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .grammar import TAG_SETS, TagSet
from .policy import GenParams
from .rl import RLHyperparams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"

    # world
    n_entities: int = 180
    n_facts: int = 140
    internal_fraction: float = 0.5
    n_eval: int = 40
    n_distractors: int = 0
    tags: str = "long"
    retrieval_k: int = 1
    window: int = 4

    # sampling
    temperature: float = 1.0
    top_p: float = 0.95
    max_retrievals: int = 8

    # RL
    beta: float = 1e-4
    clip_eps: float = 0.2
    mu: float = 0.1
    eta: float = 2.0
    learning_rate: float = 20.0
    G: int = 16
    questions_per_step: int = 8
    rl_steps: int = 60
    memory_batch: int = 16
    sigma_over: str = "all"
    checkpoint_every: int = 10

    # stage 1
    stage1_samples: int = 8
    sft_epochs: int = 6
    sft_lr: float = 5.0
    sft_batch_size: int = 64

    # ablations
    no_stage1: bool = False
    no_group_reward: bool = False
    no_memorization: bool = False

    def __post_init__(self):
        if self.tags not in TAG_SETS:
            raise ConfigError(f"tags must be one of {sorted(TAG_SETS)}")
        if self.sigma_over not in ("all", "correct"):
            raise ConfigError("sigma_over must be 'all' or 'correct'")
        if self.G < 2:
            raise ConfigError("G must be >= 2")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @property
    def tagset(self) -> TagSet:
        return TAG_SETS[self.tags]

    @property
    def gen(self) -> GenParams:
        return GenParams(temperature=self.temperature, top_p=self.top_p)

    @property
    def hyper(self) -> RLHyperparams:
        return RLHyperparams(self.beta, self.clip_eps, self.mu, self.eta, self.learning_rate, self.G)

    @property
    def world_params(self) -> dict:
        return dict(seed=self.seed, n_entities=self.n_entities, n_facts=self.n_facts,
                    internal_fraction=self.internal_fraction, n_eval=self.n_eval,
                    n_distractors=self.n_distractors)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def echo(self) -> str:
        return "\n".join(f"{f.name} = {format_value(getattr(self, f.name))}" for f in fields(self))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(name: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    hints = typing.get_type_hints(RunConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw.strip("\"'"), hints[key])
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
