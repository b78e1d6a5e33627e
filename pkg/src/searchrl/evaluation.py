"""F1, judge accuracy and retrieval count over a QA set."""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field

from .policy import GenParams
from .prompts import fill_judge
from .remote import RemoteError, RemotePolicyConfig, remote_generate
from .rewards import cover_exact_match, normalize_answer
from .rollout import DEFAULT_K, MAX_RETRIEVALS, run_rollout

log = logging.getLogger(__name__)


class JudgeUnavailable(RuntimeError):
    pass


def f1_score(prediction: str, golden: str) -> float:
    pred = normalize_answer(prediction or "").split()
    gold = normalize_answer(golden or "").split()
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(pred), overlap / len(gold)
    return 2 * p * r / (p + r)


@dataclass
class JudgeConfig:
    mode: str = "offline"
    remote: RemotePolicyConfig | None = None

    def __post_init__(self):
        if self.mode not in ("offline", "remote"):
            raise ValueError(f"unknown judge mode {self.mode!r}")
        if self.mode == "remote" and self.remote is None:
            raise ValueError("remote judge needs an endpoint")


def _parse_verdict(text: str) -> bool:
    words = normalize_answer(text).split()
    if words and words[0] in ("true", "false"):
        return words[0] == "true"
    raise JudgeUnavailable(f"unparseable judge reply {text[:60]!r}")


def remote_judge(prediction: str, golden: str, question: str, config: JudgeConfig) -> bool:
    prompt = fill_judge(question, golden, prediction)
    try:
        reply = remote_generate(config.remote, prompt, temperature=0.0, logprobs=False, max_tokens=8)
    except RemoteError as e:
        raise JudgeUnavailable(str(e)) from None
    return _parse_verdict(reply.text)


def judge(prediction: str | None, golden: str, question: str, judge_config: JudgeConfig | None = None) -> bool:
    """Offline mode is the CEM proxy; remote mode asks a model with the judge prompt.

    A remote failure raises JudgeUnavailable.
    """
    cfg = judge_config or JudgeConfig()
    if prediction is None:
        return False
    if cfg.mode == "offline":
        return cover_exact_match(prediction, golden)
    return remote_judge(prediction, golden, question, cfg)


@dataclass
class QuestionRecord:
    id: str
    question: str
    golden: str
    prediction: str | None
    f1: float
    judge: bool
    cem: bool
    retrieval_count: int
    format_ok: bool
    judge_fallback: bool = False
    error: str | None = None


@dataclass
class ReportRow:
    dataset: str
    f1: float
    judge_accuracy: float
    rc: float
    n: int


@dataclass
class EvalReport:
    rows: list[ReportRow]
    records: list[QuestionRecord]
    judge_fallbacks: int = 0
    meta: dict = field(default_factory=dict)

    def row(self, dataset: str = "all") -> ReportRow:
        for r in self.rows:
            if r.dataset == dataset:
                return r
        raise KeyError(dataset)

    @property
    def judge_accuracy(self) -> float:
        return self.row().judge_accuracy

    @property
    def rc(self) -> float:
        return self.row().rc

    def audit(self) -> bool:
        """Stored aggregates equal a fresh reduction of the records."""
        return self.rows == aggregate(self.records, self.rows_by)

    @property
    def rows_by(self) -> dict[str, str]:
        return self.meta.get("dataset_of", {})

    def table(self) -> str:
        head = f"{'Dataset':<14}{'F1':>8}{'LasJ':>8}{'RC':>8}{'n':>6}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.dataset:<14}{100 * r.f1:>8.1f}{100 * r.judge_accuracy:>8.1f}{r.rc:>8.2f}{r.n:>6}")
        if self.judge_fallbacks:
            lines.append(f"warning: {self.judge_fallbacks} judge call(s) fell back to the offline proxy")
        return "\n".join(lines)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for r in self.rows:
                f.write(json.dumps({"type": "row", **asdict(r)}) + "\n")
            for r in self.records:
                f.write(json.dumps({"type": "question", **asdict(r)}) + "\n")
        with open(str(path) + ".txt", "w", encoding="utf-8") as f:
            f.write(self.table() + "\n")


def _reduce(name, recs) -> ReportRow:
    n = len(recs)
    return ReportRow(name, sum(r.f1 for r in recs) / n, sum(r.judge for r in recs) / n,
                     sum(r.retrieval_count for r in recs) / n, n)


def aggregate(records, dataset_of: dict[str, str] | None = None) -> list[ReportRow]:
    """One row per dataset (in first-seen order) plus an ``all`` row when there are several."""
    dataset_of = dataset_of or {}
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(dataset_of.get(r.id, "all"), []).append(r)
    rows = [_reduce(name, recs) for name, recs in groups.items()]
    if "all" not in groups:
        rows.append(_reduce("all", list(records)))
    return rows


def evaluate(policy, retriever, dataset, gen_params: GenParams | None = None,
             judge_config: JudgeConfig | None = None, k: int = DEFAULT_K, tags=None,
             max_retrievals: int = MAX_RETRIEVALS, dataset_of: dict[str, str] | None = None) -> EvalReport:
    """One greedy rollout per question, scored by F1, the judge and retrieval count."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    gen = gen_params or GenParams()
    gen = GenParams(temperature=gen.temperature, top_p=gen.top_p, greedy=True,
                    segment_cap=gen.segment_cap, trace_cap=gen.trace_cap)
    cfg = judge_config or JudgeConfig()
    extra = {} if tags is None else {"tags": tags}
    records = []
    fallbacks = 0
    for q in dataset:
        try:
            r = run_rollout(policy, retriever, q, gen, max_retrievals, k=k, **extra)
        except Exception as e:  # recorded as a failed question
            log.warning("rollout failed for %s: %s", q.id, e)
            records.append(QuestionRecord(q.id, q.question, q.answer, None, 0.0, False, False, 0, False,
                                          error=repr(e)))
            continue
        trace = r.trace
        pred = trace.final_answer if (trace is not None and r.format_ok) else None
        fell_back = False
        try:
            verdict = judge(pred, q.answer, q.question, cfg)
        except JudgeUnavailable as e:
            warnings.warn(f"judge unavailable, using offline proxy: {e}")
            verdict = judge(pred, q.answer, q.question, JudgeConfig())
            fell_back = True
            fallbacks += 1
        records.append(QuestionRecord(
            q.id, q.question, q.answer, pred, f1_score(pred or "", q.answer), bool(verdict),
            pred is not None and cover_exact_match(pred, q.answer), r.retrieval_count, r.format_ok, fell_back))
    return EvalReport(aggregate(records, dataset_of), records, fallbacks, {"dataset_of": dict(dataset_of or {})})
