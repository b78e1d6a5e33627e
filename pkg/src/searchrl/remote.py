"""HTTP client for an OpenAI-compatible ``/v1/completions`` server.

Field names are documented in docs/wire_schema.md.
"""

from __future__ import annotations

import os
import re
import threading
from dataclasses import dataclass, field

import requests

from .grammar import DEFAULT_TAGS, TagSet
from .policy import GenParams, PolicyError, SegmentSample


class RemoteError(PolicyError):
    pass


class Transport(RemoteError):
    pass


class Timeout(RemoteError):
    pass


class MalformedResponse(RemoteError):
    pass


@dataclass
class RemotePolicyConfig:
    base_url: str
    timeout: float = 30.0
    max_in_flight: int = 4
    model: str = "default"
    max_tokens: int = 512
    api_key_env: str = "SEARCHRL_API_KEY"
    _slots: threading.BoundedSemaphore = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    @classmethod
    def from_env(cls, prefix: str = "SEARCHRL_POLICY") -> "RemotePolicyConfig | None":
        url = os.environ.get(f"{prefix}_URL")
        if not url:
            return None
        return cls(url, timeout=float(os.environ.get(f"{prefix}_TIMEOUT", 30.0)))


@dataclass
class Completion:
    text: str
    logprobs: list[float] | None
    finish_reason: str | None = None


def remote_generate(cfg: RemotePolicyConfig, prompt: str, temperature: float = 1.0, top_p: float = 1.0,
                    stop: list[str] | None = None, logprobs: bool = True, max_tokens: int | None = None) -> Completion:
    body = {
        "model": cfg.model,
        "prompt": prompt,
        "temperature": temperature,
        "top_p": top_p,
        "max_tokens": max_tokens or cfg.max_tokens,
        "stop": stop or [],
        "logprobs": 1 if logprobs else None,
    }
    headers = {}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    url = cfg.base_url.rstrip("/") + "/v1/completions"
    with cfg._slots:
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=cfg.timeout)
        except requests.Timeout as e:
            raise Timeout(str(e)) from None
        except requests.RequestException as e:
            raise Transport(str(e)) from None
    if resp.status_code != 200:
        raise Transport(f"HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        choice = resp.json()["choices"][0]
        text = choice["text"]
        if not isinstance(text, str):
            raise TypeError("text is not a string")
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise MalformedResponse(str(e)) from None
    lp = choice.get("logprobs") or {}
    token_lps = lp.get("token_logprobs") if isinstance(lp, dict) else None
    if token_lps is not None:
        try:
            token_lps = [float(x) for x in token_lps]
        except (TypeError, ValueError):
            raise MalformedResponse("token_logprobs must be numbers") from None
    return Completion(text, token_lps, choice.get("finish_reason"))


def split_tokens(text: str, tags: TagSet = DEFAULT_TAGS) -> list[str]:
    """Tag-aware whitespace split of an arbitrary text fragment."""
    specials = sorted(tags.special_tokens, key=len, reverse=True)
    parts = re.split("(" + "|".join(re.escape(t) for t in specials) + ")", text)
    out = []
    for p in parts:
        if p in specials:
            out.append(p)
        else:
            out.extend(p.split())
    return out


class RemotePolicy:
    """Policy backed by a completion server.

    Server log-probs are aligned to the server's own tokenization, not ours,
    so samples carry ``logps=None`` unless the counts happen to agree; such
    rollouts are evaluation-only.
    """

    def __init__(self, cfg: RemotePolicyConfig, tags: TagSet = DEFAULT_TAGS, system_prompt: str = ""):
        self.cfg = cfg
        self.tags = tags
        self.system_prompt = system_prompt

    def sample_segment(self, prompt, partial, gen: GenParams, rng, stop_tokens, forbidden=frozenset()) -> SegmentSample:
        text = self.system_prompt + " ".join(prompt) + "\n" + " ".join(partial)
        stops = sorted(t for t in stop_tokens if t != self.tags.answer_close)
        comp = remote_generate(self.cfg, text, temperature=0.0 if gen.greedy else gen.temperature,
                               top_p=gen.top_p, stop=stops)
        out_text = comp.text
        ext_open, ext_close = self.tags.external_open, self.tags.external_close
        if comp.finish_reason == "stop" and out_text.rfind(ext_open) > out_text.rfind(ext_close):
            # servers strip the matched stop string
            out_text += ext_close
        toks = split_tokens(out_text, self.tags)
        for t in forbidden:
            if t in toks:
                toks = toks[: toks.index(t)]
        if not toks:
            toks = ["<eos>"]
        logps = comp.logprobs if comp.logprobs is not None and len(comp.logprobs) == len(toks) else None
        return SegmentSample(toks, logps, capped=comp.finish_reason == "length")
