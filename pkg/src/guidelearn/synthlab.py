"""A network-free testbed for the learning loop.

A hidden rule-based concept labels token-bag instances. Scripted agents
stand in for the LLM: the generalizer keeps only concept tokens, the
embedder hashes those tokens, and the reasoner answers correctly with
probability ``p0`` unless a retrieved guideline matches the instance, in
which case it follows that guideline with probability ``p1``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from guidelearn.agents.backends import FunctionBackend
from guidelearn.agents.embeddings import EmbeddingProvider, hashed_embedding
from guidelearn.agents.templates import EMPTY_GUIDELINES, PromptTemplate
from guidelearn.core import ClassLabel, HyperParams, Instance, TaskSpec
from guidelearn.engine import Backends, EpochReport, predict, train
from guidelearn.store import GuidelineStore

NO_PATTERN = "generic statement"

REASONER_TEMPLATE = """{instruction}

Guidelines:
{retrieved_guidelines}

Input: {input}
"""
GENERALIZER_TEMPLATE = """Rewrite the input keeping only what matters for the label.
Input: {input}
"""

_GUIDELINE_LINE = re.compile(r"^(\d+)\. (.*)$")
_VERDICT = re.compile(r"The label is (\S+)\.\s*$")


@dataclass(frozen=True)
class ConceptRule:
    pattern: frozenset[str]
    label: str
    priority: int = 0


@dataclass
class SyntheticWorld:
    concept: list[ConceptRule]
    vocab: list[str]
    p0: float = 0.6
    p1: float = 0.95
    seed: int = 0
    rule_rate: float = 0.8
    fillers: tuple[int, int] = (3, 6)

    def __post_init__(self) -> None:
        patterns = [r.pattern for r in self.concept]
        if len(set(patterns)) != len(patterns):
            raise ValueError("concept patterns must be distinct")
        if not 0.0 <= self.p0 <= 1.0 or not 0.0 <= self.p1 <= 1.0:
            raise ValueError("p0 and p1 must lie in [0, 1]")
        if not 0.0 <= self.rule_rate <= 1.0:
            raise ValueError("rule_rate must lie in [0, 1]")
        toks = self.pattern_vocab
        if any(t != t.lower() or not re.fullmatch(r"\w+", t) for t in toks | set(self.vocab)):
            raise ValueError("tokens must be lowercase single words")
        if toks & set(self.vocab):
            raise ValueError(f"filler vocabulary overlaps concept tokens: {sorted(toks & set(self.vocab))}")
        if not self.vocab:
            raise ValueError("empty filler vocabulary")
        if len(self.labels) < 2:
            raise ValueError("a world needs at least two labels")

    @property
    def pattern_vocab(self) -> set[str]:
        return set().union(*(r.pattern for r in self.concept)) if self.concept else set()

    @property
    def labels(self) -> list[str]:
        return list(dict.fromkeys(r.label for r in self.concept))

    @property
    def catch_all(self) -> ConceptRule | None:
        for r in self.concept:
            if not r.pattern:
                return r
        return None

    @property
    def seedable_rules(self) -> list[ConceptRule]:
        return [r for r in self.concept if r.pattern]

    def true_label(self, tokens: set[str] | frozenset[str]) -> str:
        best = None
        for i, r in enumerate(self.concept):
            if r.pattern <= tokens and (best is None or r.priority > best[0]):
                best = (r.priority, i, r.label)
        if best is None:
            raise ValueError(f"no concept rule applies to {sorted(tokens)}")
        return best[2]

    def insertion_rate(self) -> float:
        return self.rule_rate if self.catch_all is not None else 1.0


def load_world(path: str | Path) -> SyntheticWorld:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return world_from_dict(doc)


def world_from_dict(doc: dict[str, Any]) -> SyntheticWorld:
    if not isinstance(doc, dict) or "rules" not in doc:
        raise ValueError("world description needs a 'rules' list")
    rules = [ConceptRule(frozenset(str(t).lower() for t in r.get("pattern", [])), str(r["label"]),
                         int(r.get("priority", 0))) for r in doc["rules"]]
    vocab = doc.get("vocab")
    if vocab is None:
        vocab = [f"w{i:03d}" for i in range(int(doc.get("vocab_size", 200)))]
    fillers = tuple(doc.get("fillers", (3, 6)))
    return SyntheticWorld(rules, [str(v) for v in vocab], float(doc.get("p0", 0.6)), float(doc.get("p1", 0.95)),
                          int(doc.get("seed", 0)), float(doc.get("rule_rate", 0.8)), (int(fillers[0]), int(fillers[1])))


def demo_world(**overrides: Any) -> SyntheticWorld:
    text = resources.files("guidelearn").joinpath("data/demo_world.yaml").read_text(encoding="utf-8")
    doc = yaml.safe_load(text)
    doc.update(overrides)
    return world_from_dict(doc)


def label_coverage(world: SyntheticWorld) -> dict[str, float]:
    """Exact label probabilities of ``generate_dataset`` without noise."""
    probs = {label: 0.0 for label in world.labels}
    seeded = world.seedable_rules
    rate = world.insertion_rate()
    if world.catch_all is not None:
        probs[world.catch_all.label] += 1.0 - rate
    for r in seeded:
        probs[world.true_label(r.pattern)] += rate / len(seeded)
    return probs


def generate_dataset(world: SyntheticWorld, n: int, stream: int = 0, noise: float = 0.0,
                     prefix: str = "syn") -> list[Instance]:
    """``n`` labeled instances drawn from the seeded stream ``(world.seed, stream)``.

    With ``noise`` > 0 that fraction of gold labels (in expectation) is
    replaced by a different, uniformly chosen label; the texts are the same
    as for the clean dataset.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([world.seed, stream])
    # separate stream so noisy and clean datasets share the same texts
    flip_rng = np.random.default_rng([world.seed, stream, 1])
    seeded = world.seedable_rules
    rate = world.insertion_rate()
    labels = world.labels
    lo, hi = world.fillers
    out = []
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        tokens = [world.vocab[j] for j in rng.integers(0, len(world.vocab), size=k)]
        if seeded and rng.random() < rate:
            tokens.extend(sorted(seeded[int(rng.integers(0, len(seeded)))].pattern))
        rng.shuffle(tokens)
        gold = world.true_label(set(tokens))
        u, pick = flip_rng.random(), flip_rng.random()
        if u < noise:
            others = [label for label in labels if label != gold]
            gold = others[int(pick * len(others))]
        out.append(Instance(f"{prefix}-{stream}-{i:05d}", " ".join(tokens), gold=gold))
    return out


class PatternEmbedder(EmbeddingProvider):
    """Hashed embedding of only the concept tokens in a text."""

    def __init__(self, world: SyntheticWorld, dimension: int = 256):
        self.dimension = dimension
        self.vocab = world.pattern_vocab
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        key = " ".join(sorted(set(re.findall(r"\w+", text.lower())) & self.vocab))
        vec = self._cache.get(key)
        if vec is None:
            vec = hashed_embedding(key, self.dimension)
            self._cache[key] = vec
        return vec


def _input_tokens(prompt: str) -> set[str]:
    for line in reversed(prompt.splitlines()):
        if line.startswith("Input: "):
            return set(line[len("Input: "):].split())
    raise ValueError("prompt has no 'Input:' line")


def _guidelines(prompt: str, vocab: set[str]) -> list[tuple[int, frozenset[str], str]]:
    lines = prompt.splitlines()
    try:
        start = lines.index("Guidelines:") + 1
    except ValueError:
        return []
    found = []
    for line in lines[start:]:
        if not line.strip() or line.strip() == EMPTY_GUIDELINES:
            break
        m = _GUIDELINE_LINE.match(line)
        if not m:
            break
        verdict = _VERDICT.search(m.group(2))
        if verdict is None:
            continue
        body = m.group(2)[:verdict.start()]
        toks = frozenset(set(re.findall(r"\w+", body.lower())) & vocab)
        found.append((int(m.group(1)), toks, verdict.group(1)))
    return found


@dataclass
class SyntheticAgents:
    world: SyntheticWorld
    embedder: PatternEmbedder = field(init=False)

    def __post_init__(self) -> None:
        self.embedder = PatternEmbedder(self.world)
        self._vocab = self.world.pattern_vocab

    def generalize(self, prompt: str, seed: int | None = None) -> str:
        kept = sorted(_input_tokens(prompt) & self._vocab)
        return " ".join(kept) if kept else NO_PATTERN

    def reason(self, prompt: str, seed: int | None = None) -> str:
        tokens = _input_tokens(prompt)
        rng = np.random.default_rng(seed if seed is not None else 0)
        u = rng.random()
        labels = self.world.labels
        matching = [g for g in _guidelines(prompt, self._vocab) if g[1] <= tokens]
        if matching:
            idx, toks, label = max(matching, key=lambda g: (len(g[1]), -g[0]))
            if u < self.world.p1:
                return (f"Guideline {idx} covers the tokens {' '.join(sorted(toks)) or '(none)'}.\n"
                        f"Answer: {label}\nReferences: [{idx}]")
            truth = label
        else:
            truth = self.world.true_label(tokens)
            if u < self.world.p0:
                return f"The input reads as {truth}.\nAnswer: {truth}"
        others = [c for c in labels if c != truth]
        wrong = others[int(rng.integers(0, len(others)))]
        return f"Unsure; guessing.\nAnswer: {wrong}"

    def backends(self, seed: int = 0, parallelism: int = 1) -> Backends:
        return Backends(
            reasoner=FunctionBackend(self.reason),
            generalizer=FunctionBackend(self.generalize),
            embedder=self.embedder,
            seed=seed,
            parallelism=parallelism,
        )


def scripted_concept_agents(world: SyntheticWorld, seed: int = 0) -> Backends:
    return SyntheticAgents(world).backends(seed)


def synthetic_task(world: SyntheticWorld, hyper: HyperParams | None = None) -> TaskSpec:
    negative = world.catch_all.label if world.catch_all is not None else None
    return TaskSpec(
        task_id="synthetic",
        instruction="Assign the input to one of: " + ", ".join(world.labels) + ".",
        classes=[ClassLabel(label, negative=(label == negative)) for label in world.labels],
        templates={
            "reasoner": PromptTemplate("reasoner", REASONER_TEMPLATE),
            "generalizer": PromptTemplate("generalizer", GENERALIZER_TEMPLATE),
        },
        hyper=hyper or experiment_hyper(),
        kind="synthetic",
        verdict_template="The label is {label}.",
    )


def experiment_hyper(**overrides: Any) -> HyperParams:
    """Defaults for lab runs: one reasoning path so accuracy tracks p0/p1 directly."""
    base = dict(epochs=3, top_k=3, retrieval_threshold=0.95, sc_trials=1, sc_temperature=1.0,
                discard_threshold=0.0, min_evidence=1, dup_threshold=0.98)
    base.update(overrides)
    return HyperParams(**base)


@dataclass
class ExperimentResult:
    baseline_accuracy: float
    trained_accuracy: float
    curve: list[dict[str, Any]]
    store_snapshot: list[dict[str, Any]]
    reports: list[EpochReport]
    coverage: float

    @property
    def lift(self) -> float:
        return self.trained_accuracy - self.baseline_accuracy

    @property
    def rules_pruned(self) -> int:
        return sum(r.rules_pruned for r in self.reports)

    def to_dict(self) -> dict[str, Any]:
        return {
            "baseline_accuracy": self.baseline_accuracy,
            "trained_accuracy": self.trained_accuracy,
            "lift": self.lift,
            "coverage": self.coverage,
            "rules_pruned": self.rules_pruned,
            "curve": self.curve,
            "store": self.store_snapshot,
        }


def _accuracy(dataset: Sequence[Instance], outcomes) -> float:
    gold = {x.id: x.gold for x in dataset}
    return sum(o.answer == gold[o.instance_id] for o in outcomes) / len(dataset)


def run_experiment(
    world: SyntheticWorld,
    n_train: int,
    n_test: int,
    hyper: HyperParams | None = None,
    noise: float = 0.0,
    seed: int | None = None,
) -> ExperimentResult:
    """Baseline (empty store) vs trained accuracy on one held-out test set.

    ``noise`` flips training labels only; the test set is always clean.
    """
    if seed is not None:
        world = SyntheticWorld(world.concept, world.vocab, world.p0, world.p1, seed, world.rule_rate, world.fillers)
    task = synthetic_task(world, hyper)
    backends = scripted_concept_agents(world, seed=world.seed)
    train_set = generate_dataset(world, n_train, stream=1, noise=noise, prefix="train")
    test_set = generate_dataset(world, n_test, stream=2, prefix="test")

    store = GuidelineStore(backends.embedder.dimension, task.task_id)
    baseline = _accuracy(test_set, predict(test_set, store, task, backends))
    curve: list[dict[str, Any]] = [{"epoch": 0, "test_accuracy": baseline, "n_rules": 0}]

    def on_epoch_end(report: EpochReport, st: GuidelineStore) -> None:
        acc = _accuracy(test_set, predict(test_set, st, task, backends))
        curve.append({"epoch": report.epoch, "train_accuracy": report.accuracy, "test_accuracy": acc,
                      "n_rules": len(st), "added": report.rules_added, "merged": report.rules_merged,
                      "pruned": report.rules_pruned})

    store, reports = train(train_set, store, task, backends, on_epoch_end=on_epoch_end)
    final = predict(test_set, store, task, backends)
    coverage = sum(bool(o.retrieved) for o in final) / len(test_set)
    return ExperimentResult(baseline, _accuracy(test_set, final), curve, store.snapshot(), reports, coverage)
