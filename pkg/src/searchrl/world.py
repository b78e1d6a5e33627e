"""Synthetic two-hop QA world with an internal/external split of facts.

Entities sit in three layers: people -> organizations -> cities. Every
person has one fact linking it to an organization and every organization
one fact linking it to a city, so a question "city-relation of
org-relation of @Person" has a unique answer two hops away.

Each entity has two surface tokens: its name (``Mirn``), used in queries,
passage titles and answers, and its mention (``@Mirn``), used when the
entity is the object of a fact. Keeping the two apart lets a log-linear
policy tell "recall the next entity" from "copy this entity" using only
bag-of-window features.

Facts tagged ``internal`` are trained into the policy as recitations and
have no passage; each ``external`` fact becomes exactly one corpus passage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import NO_RESULTS, Corpus, Passage, normalize_terms
from .grammar import DEFAULT_TAGS, TagSet
from .knowledge import SFTSample, first_passage_text
from .policy import GenParams, ScriptedPolicy, ToyPolicy, Vocabulary

HOP1_RELATIONS = ("founded", "joined", "funded", "advised")
HOP2_RELATIONS = ("based_in", "listed_in", "taxed_in")
DISTRACTOR_RELATION = "visited"
FIRST, THEN, SO = "first", "then", "so"
OF = "of"


class InfeasibleConfig(ValueError):
    pass


class ConvergenceFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Fact:
    id: str
    subject: str
    relation: str
    object: str
    channel: str


@dataclass
class FactGraph:
    entities: list[str]
    layers: list[list[str]]
    facts: list[Fact]
    distractors: list[Fact] = field(default_factory=list)

    def __post_init__(self):
        self.by_subject = {f.subject: f for f in self.facts}

    def internal(self) -> list[Fact]:
        return [f for f in self.facts if f.channel == "internal"]

    def external(self) -> list[Fact]:
        return [f for f in self.facts if f.channel == "external"]


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    answer: str
    hops: tuple[str, str]
    channels: tuple[str, str]
    split: str = "train"

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class World:
    graph: FactGraph
    corpus: Corpus
    questions: list[QAExample]
    seed: int = 0

    @property
    def train(self) -> list[QAExample]:
        return [q for q in self.questions if q.split == "train"]

    @property
    def eval(self) -> list[QAExample]:
        return [q for q in self.questions if q.split == "eval"]

    @property
    def golden(self) -> dict[str, str]:
        return {q.id: q.answer for q in self.questions}

    def fact(self, fid: str) -> Fact:
        return self._facts[fid]

    def __post_init__(self):
        self._facts = {f.id: f for f in self.graph.facts}

    def digest(self) -> str:
        h = hashlib.sha256()
        for f in self.graph.facts + self.graph.distractors:
            h.update(json.dumps(asdict(f)).encode())
        for q in self.questions:
            h.update(json.dumps(q.to_record()).encode())
        for pid in sorted(self.corpus.passages):
            h.update(json.dumps(asdict(self.corpus.passages[pid])).encode())
        return h.hexdigest()

    def vocabulary(self, tags: TagSet = DEFAULT_TAGS, k: int = 1) -> Vocabulary:
        toks: list[str] = []
        for e in self.graph.entities:
            toks += [e, mention(e)]
        toks += list(HOP1_RELATIONS + HOP2_RELATIONS) + [DISTRACTOR_RELATION, OF, FIRST, THEN, SO, "—"]
        toks += [f"({i})" for i in range(1, k + 1)]
        toks += NO_RESULTS.title.split() + NO_RESULTS.text.split()
        seen, out = set(), []
        for t in toks:
            if t not in seen:
                seen.add(t)
                out.append(t)
        return Vocabulary(out, tags)

    def dump(self, out_dir: str | Path):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.corpus.dump(out / "corpus.jsonl")
        with open(out / "qa.jsonl", "w") as f:
            for q in self.questions:
                f.write(json.dumps(q.to_record()) + "\n")
        with open(out / "graph.jsonl", "w") as f:
            for fact in self.graph.facts:
                f.write(json.dumps(asdict(fact)) + "\n")
            for fact in self.graph.distractors:
                f.write(json.dumps({**asdict(fact), "channel": "distractor"}) + "\n")


def mention(entity: str) -> str:
    return "@" + entity


def load_questions(path) -> list[QAExample]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                rec["hops"] = tuple(rec["hops"])
                rec["channels"] = tuple(rec["channels"])
                out.append(QAExample(**rec))
    return out


_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "n", "r", "l", "s", "m", "x", "th"]


def _names(rng: np.random.Generator, n: int) -> list[str]:
    names, seen = [], set()
    while len(names) < n:
        syl = int(rng.integers(1, 3))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl)) + _CODAS[rng.integers(len(_CODAS))]
        w = w.capitalize()
        key = normalize_terms(w)[0]
        if key in seen or len(w) < 3:
            continue
        seen.add(key)
        names.append(w)
    return names


def generate_world(seed: int = 0, n_entities: int = 180, n_facts: int = 140, internal_fraction: float = 0.5,
                   n_eval: int = 40, n_distractors: int = 0) -> World:
    """Deterministic layered world; one question per person."""
    if not 0.0 <= internal_fraction <= 1.0:
        raise InfeasibleConfig("internal_fraction must lie in [0, 1]")
    n_cities = n_entities - n_facts
    # people + orgs = n_facts; choose orgs so that each layer can cover the next
    n_orgs = max(n_cities, (n_facts + 4) // 5)
    n_people = n_facts - n_orgs
    if n_cities < 1 or n_orgs < n_cities or n_people < n_orgs:
        raise InfeasibleConfig(f"cannot lay out {n_entities} entities with {n_facts} facts")
    if not 0 <= n_eval < n_people:
        raise InfeasibleConfig("n_eval must leave at least one training question")
    rng = np.random.default_rng(seed)
    names = _names(rng, n_entities)
    people, orgs, cities = names[:n_people], names[n_people:n_people + n_orgs], names[n_people + n_orgs:]

    def cover(src, dst):
        # surjective assignment: every dst gets at least one src
        targets = list(dst) + [dst[int(i)] for i in rng.integers(len(dst), size=len(src) - len(dst))]
        rng.shuffle(targets)
        return dict(zip(src, targets))

    p2o, o2c = cover(people, orgs), cover(orgs, cities)
    facts = []
    for s, o in list(p2o.items()) + list(o2c.items()):
        rels = HOP1_RELATIONS if s in p2o else HOP2_RELATIONS
        facts.append((s, rels[int(rng.integers(len(rels)))], o))
    n_int = int(round(internal_fraction * len(facts)))
    channels = np.array(["internal"] * n_int + ["external"] * (len(facts) - n_int))
    rng.shuffle(channels)
    fact_objs = [Fact(f"f{i:04d}", s, r, o, str(c)) for i, ((s, r, o), c) in enumerate(zip(facts, channels))]
    distractors = []
    for i in range(n_distractors):
        s = names[int(rng.integers(n_entities))]
        y = names[int(rng.integers(n_entities))]
        distractors.append(Fact(f"d{i:04d}", s, DISTRACTOR_RELATION, y, "distractor"))
    graph = FactGraph(names, [people, orgs, cities], fact_objs, distractors)

    # distractor ids sort after fact ids, so a fact passage wins score ties
    passages = [Passage(f"p{f.id}" if f.channel != "distractor" else f"px{f.id}", f.subject,
                        f"{f.subject} {f.relation} {mention(f.object)}")
                for f in fact_objs + distractors if f.channel != "internal"]
    corpus = Corpus.from_passages(passages)

    questions = []
    eval_people = set(people[len(people) - n_eval:]) if n_eval else set()
    for i, p in enumerate(people):
        f1 = graph.by_subject[p]
        f2 = graph.by_subject[f1.object]
        questions.append(QAExample(
            id=f"q{i:04d}",
            question=f"{f2.relation} {OF} {f1.relation} {OF} {mention(p)}",
            answer=f2.object,
            hops=(f1.id, f2.id),
            channels=(f1.channel, f2.channel),
            split="eval" if p in eval_people else "train",
        ))
    return World(graph, corpus, questions, seed)


# model-side traces

def hop_tokens(fact: Fact, mode: str, tags: TagSet = DEFAULT_TAGS, recalled: str | None = None) -> list[str]:
    """Tokens the model emits for one hop; documents are injected by the rollout engine."""
    if mode == "internal":
        return [tags.internal_open, mention(recalled or fact.object), tags.internal_close]
    return [tags.external_open, fact.subject, tags.external_close]


def trace_tokens(world: World, q: QAExample, modes: tuple[str, str], tags: TagSet = DEFAULT_TAGS,
                 recalled: tuple[str | None, str | None] = (None, None), answer: str | None = None) -> list[str]:
    f1, f2 = world.fact(q.hops[0]), world.fact(q.hops[1])
    hop1 = hop_tokens(f1, modes[0], tags, recalled[0])
    bridge = recalled[0] if (modes[0] == "internal" and recalled[0]) else f1.object
    f2_eff = world.graph.by_subject.get(bridge, f2)
    hop2 = hop_tokens(f2_eff, modes[1], tags, recalled[1])
    if modes[1] == "internal":
        final = recalled[1] or f2_eff.object
    else:
        final = f2_eff.object
    return [FIRST, *hop1, THEN, *hop2, SO, tags.answer_open, answer or final, tags.answer_close]


def with_documents(world: World, q: QAExample, model_tokens: list[str], tags: TagSet = DEFAULT_TAGS,
                   k: int = 1) -> tuple[list[str], list[int]]:
    """Replay ``model_tokens`` through the rollout engine and return the full tokens and mask."""
    from .rollout import run_rollout

    r = run_rollout(ScriptedPolicy(model_tokens, tags), world.corpus, q, GenParams(greedy=True), k=k, tags=tags)
    return r.tokens, [int(m) for m in r.mask]


def oracle_policy(world: World, tags: TagSet = DEFAULT_TAGS, internal_only: bool = False) -> ScriptedPolicy:
    """Scripted policy reading the graph: internal hops for internal facts, retrieval otherwise.

    With ``internal_only`` it never retrieves and can only answer from
    internal facts, guessing nothing for external hops.
    """
    by_question = {q.question: q for q in world.questions}

    def script(question: str):
        q = by_question[question]
        f1, f2 = world.fact(q.hops[0]), world.fact(q.hops[1])
        modes = []
        for f in (f1, f2):
            modes.append("internal" if internal_only or f.channel == "internal" else "external")
        if internal_only:
            unknown = [f.channel != "internal" for f in (f1, f2)]
            rec1 = NO_RESULTS.title if unknown[0] else None
            rec2 = NO_RESULTS.title if (unknown[1] or unknown[0]) else None
            return trace_tokens(world, q, tuple(modes), tags, recalled=(rec1, rec2),
                                answer=rec2 or f2.object)
        return trace_tokens(world, q, tuple(modes), tags)

    return ScriptedPolicy(script, tags)


# base-policy seeding

def recitation_sample(fact: Fact, tags: TagSet = DEFAULT_TAGS) -> SFTSample:
    # only the recalled object and the closer are trained, so recitation does
    # not shift the choice between recalling and searching
    toks = [FIRST, tags.internal_open, mention(fact.object), tags.internal_close]
    return SFTSample(f"{fact.relation} {OF} {mention(fact.subject)}", toks, [0, 0, 1, 1], fact.id)


def recall_probe(policy: ToyPolicy, facts, held_out: bool = True) -> tuple[float, float]:
    """Greedy recall of each fact's object.

    The held-out probe uses the second-hop context (after a previous
    internal segment), which recitation training never shows.
    """
    if not facts:
        return 1.0, 1.0
    tags = policy.tags
    cands = [policy.vocab.id(mention(e)) for e in policy_entities(policy)]
    hits, conf = 0, 0.0
    for f in facts:
        if held_out:
            ctx = [tags.internal_open, mention(f.subject), tags.internal_close, THEN, tags.internal_open]
        else:
            ctx = [f.relation, OF, mention(f.subject), FIRST, tags.internal_open]
        logd = policy.log_distribution(ctx)
        best = max(cands, key=lambda j: (logd[j], -j))
        hits += policy.vocab.tokens[best] == mention(f.object)
        conf += float(np.exp(logd[policy.vocab.id(mention(f.object))]))
    return hits / len(facts), conf / len(facts)


def recitation_accuracy(policy: ToyPolicy, facts, held_out: bool = True) -> float:
    return recall_probe(policy, facts, held_out)[0]


def policy_entities(policy: ToyPolicy) -> list[str]:
    return [t[1:] for t in policy.vocab.tokens if t.startswith("@")]


def seed_internal_knowledge(policy: ToyPolicy, graph: FactGraph, channel: str = "internal", lr: float = 20.0,
                            max_epochs: int = 60, target: float = 0.95, batch_size: int = 8,
                            seed: int = 0, min_confidence: float = 0.0, rehearsal=()) -> ToyPolicy:
    """Maximum-likelihood training on recitations of one channel's facts.

    Stops once held-out recall accuracy reaches ``target`` and the mean
    probability of the right object reaches ``min_confidence``. Samples in
    ``rehearsal`` are mixed into every epoch so earlier behaviour is kept.
    """
    from .knowledge import run_sft

    facts = [f for f in graph.facts if f.channel == channel]
    if not facts:
        return policy
    tags = policy.tags
    # recitations are repeated so they are not swamped by the rehearsal set
    reps = max(1, round(len(rehearsal) / (4 * len(facts))))
    samples = [recitation_sample(f, tags) for f in facts] * reps + list(rehearsal)
    def done():
        acc, conf = recall_probe(policy, facts)
        return acc >= target and conf >= min_confidence

    for epoch in range(max_epochs):
        if done():
            return policy
        policy, _ = run_sft(policy, samples, epochs=1, batch_size=batch_size, lr=lr, seed=seed + epoch)
    if not done():
        acc, conf = recall_probe(policy, facts)
        raise ConvergenceFailure(f"recall accuracy {acc:.2f}, confidence {conf:.2f} after {max_epochs} epochs")
    return policy


def format_prior_samples(world: World, rng: np.random.Generator, per_question: int = 8,
                         tags: TagSet = DEFAULT_TAGS, k: int = 1, calibration: float = 0.75) -> list[SFTSample]:
    """Demonstrations of the trace format with imperfectly calibrated tool choice.

    A hop on a fact the model holds is answered internally with probability
    ``calibration``, a hop on any other fact with ``1 - calibration``;
    0.5 gives knowledge-blind choice. An internal hop on a fact the model
    does not hold recalls a random wrong entity, the way an untrained model
    hallucinates.
    """
    internal = {f.id for f in world.graph.internal()}
    entity_pool = world.graph.entities
    out = []
    for q in world.questions:
        for _ in range(per_question):
            f1 = world.fact(q.hops[0])
            f2_true = world.fact(q.hops[1])
            modes = tuple("internal" if rng.random() < (calibration if f.id in internal else 1 - calibration)
                          else "external" for f in (f1, f2_true))
            rec = [None, None]
            if modes[0] == "internal" and f1.id not in internal:
                rec[0] = entity_pool[int(rng.integers(len(entity_pool)))]
            bridge = rec[0] or f1.object
            f2 = world.graph.by_subject.get(bridge)
            if modes[1] == "internal" and (f2 is None or f2.id not in internal):
                rec[1] = entity_pool[int(rng.integers(len(entity_pool)))]
            if f2 is None:
                modes = (modes[0], "internal")
                rec[1] = rec[1] or entity_pool[int(rng.integers(len(entity_pool)))]
            model = _trace_with_bridge(world, q, modes, rec, tags)
            toks, mask = with_documents(world, q, model, tags, k)
            out.append(SFTSample(q.question, toks, mask, q.id))
    return out


def _trace_with_bridge(world, q, modes, rec, tags):
    f1 = world.fact(q.hops[0])
    bridge = rec[0] or f1.object
    hop1 = hop_tokens(f1, modes[0], tags, rec[0])
    f2 = world.graph.by_subject.get(bridge)
    if modes[1] == "internal":
        obj = rec[1] or f2.object
        hop2 = [tags.internal_open, mention(obj), tags.internal_close]
    else:
        obj = f2.object
        hop2 = [tags.external_open, bridge, tags.external_close]
    return [FIRST, *hop1, THEN, *hop2, SO, tags.answer_open, obj, tags.answer_close]


def base_policy(world: World, seed: int = 0, tags: TagSet = DEFAULT_TAGS, k: int = 1, window: int = 4,
                prior_epochs: int = 20, prior_lr: float = 40.0, min_confidence: float = 0.7,
                calibration: float = 0.75) -> ToyPolicy:
    """Untrained-from-scratch stand-in for an instruction-following LLM.

    Combines recitation of internal facts with format demonstrations whose
    tool choice is only loosely tied to what the policy knows, so the
    policy follows the tag protocol but retrieves too often and sometimes
    hallucinates.
    """
    from .knowledge import run_sft

    vocab = world.vocabulary(tags, k)
    policy = ToyPolicy(vocab, window)
    rng = np.random.default_rng([seed, 7])
    demos = format_prior_samples(world, rng, tags=tags, k=k, calibration=calibration)
    policy, _ = run_sft(policy, demos, epochs=prior_epochs, batch_size=16, lr=prior_lr, seed=seed)
    return seed_internal_knowledge(policy, world.graph, lr=prior_lr, seed=seed, min_confidence=min_confidence,
                                   batch_size=16, rehearsal=demos)


def fact_of_document(query: str, payload: str) -> str:
    """The object mention stated by the top passage (``Subject relation @Object``)."""
    return first_passage_text(query, payload).split()[-1]
