"""Inference with retrieved guidelines, the guideline learning loop, and active selection."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from guidelearn import _kernels
from guidelearn.agents.backends import AgentBackend, BackendError, ContentError, user_turn
from guidelearn.agents.embeddings import EmbeddingProvider
from guidelearn.agents.roles import (
    UnparseableReply,
    generalize,
    instance_bindings,
    parse_reasoner_reply,
    reflect,
)
from guidelearn.agents.templates import PromptTemplate, format_guideline_block
from guidelearn.core import GeneralForm, Instance, TaskSpec
from guidelearn.store import GuidelineStore

log = logging.getLogger(__name__)

AuditSink = Callable[[dict[str, Any]], None]


@dataclass
class Backends:
    """Agents used by the engine. ``generalizer`` defaults to ``reasoner``."""

    reasoner: AgentBackend
    embedder: EmbeddingProvider
    generalizer: AgentBackend | None = None
    summarizer: AgentBackend | None = None
    seed: int = 0
    parallelism: int = 1

    @property
    def generalizer_backend(self) -> AgentBackend:
        return self.generalizer or self.reasoner


@dataclass
class Trial:
    reasoning: str
    answer: str | None
    references: tuple[int, ...]
    raw: str


@dataclass
class ReasonOutcome:
    instance_id: str
    distribution: dict[str, float]
    answer: str | None
    references: list[int]
    retrieved: list[int]
    trials: list[Trial]
    general_form: str = ""
    similarities: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class AuditLog:
    """Append-only JSON-lines audit file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def __call__(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def trial_seed(base: int, instance_id: str, salt: str) -> int:
    """Seed derived from the instance rather than call order, so runs replay in any order."""
    h = hashlib.blake2b(f"{base}|{salt}|{instance_id}".encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(h, "little") & 0x7FFFFFFF


def _generalizer_template(task: TaskSpec) -> PromptTemplate | tuple[PromptTemplate, PromptTemplate]:
    if "generalizer_types" in task.templates:
        return (task.template("generalizer"), task.template("generalizer_types"))
    return task.template("generalizer")


def aggregate(answers: Sequence[str | None], class_order: Sequence[str]) -> tuple[dict[str, float], str]:
    """Vote shares over parsed answers and the winner; ties go to the earlier class."""
    valid = [a for a in answers if a is not None]
    if not valid:
        raise ContentError("no trial produced a parseable answer")
    T = len(valid)
    counts: dict[str, int] = {}
    for a in valid:
        counts[a] = counts.get(a, 0) + 1
    rank = {c: i for i, c in enumerate(class_order)}
    winner = min(counts, key=lambda c: (-counts[c], rank.get(c, len(rank)), c))
    dist = {c: counts[c] / T for c in sorted(counts, key=lambda c: rank.get(c, len(rank)))}
    return dist, winner


def reason(
    instance: Instance,
    store: GuidelineStore,
    task: TaskSpec,
    backends: Backends,
    salt: str = "predict",
    audit: AuditSink | None = None,
) -> ReasonOutcome:
    if task.requires_summary and instance.derived_text is None:
        raise ValueError(f"instance {instance.id} needs a trigger description before reasoning")
    h = task.hyper
    seed = trial_seed(backends.seed, instance.id, salt)

    gform = generalize(backends.generalizer_backend, _generalizer_template(task), instance, task, seed=seed)
    query = backends.embedder.embed(gform.text)
    hits = store.retrieve(query, h.top_k, h.retrieval_threshold)
    retrieved = [g.id for g, _ in hits]

    pool = instance_bindings(instance, task)
    pool["retrieved_guidelines"] = format_guideline_block([g.text for g, _ in hits])
    prompt = task.template("reasoner").render_from(pool)
    turns = user_turn(prompt)

    raws = backends.reasoner.complete_n(turns, h.sc_trials, h.sc_temperature, seed)
    trials: list[Trial] = []
    n_unparsed = 0
    for t, raw in enumerate(raws):
        attempt = 0
        while True:
            try:
                reply = parse_reasoner_reply(raw, len(hits), task.class_ids)
                for w in reply.warnings:
                    log.warning("instance %s trial %d: %s", instance.id, t, w)
                trials.append(Trial(reply.reasoning, reply.answer, reply.references, raw))
                break
            except UnparseableReply as exc:
                if attempt >= h.reply_retries:
                    log.warning("instance %s trial %d unparseable after %d retries: %s",
                                instance.id, t, attempt, exc)
                    trials.append(Trial("", task.negative_class, (), raw))
                    n_unparsed += 1
                    break
                attempt += 1
                raw = backends.reasoner.complete(turns, h.sc_temperature, seed + 7919 * attempt + t)
    if n_unparsed == len(trials):
        raise UnparseableReply(f"instance {instance.id}: all {len(trials)} trials unparseable",
                               trials[0].raw if trials else "")

    dist, answer = aggregate([tr.answer for tr in trials], task.class_ids)
    refs: list[int] = []
    for tr in trials:
        if tr.answer == answer:
            for idx in tr.references:
                gid = retrieved[idx - 1]
                if gid not in refs:
                    refs.append(gid)
    outcome = ReasonOutcome(
        instance_id=instance.id, distribution=dist, answer=answer, references=refs,
        retrieved=retrieved, trials=trials, general_form=gform.text,
        similarities=[s for _, s in hits],
    )
    if audit is not None:
        audit({
            "instance_id": instance.id, "salt": salt, "general_form": gform.text,
            "retrieved": retrieved, "similarities": [round(s, 9) for s in outcome.similarities],
            "trials": [tr.raw for tr in trials], "distribution": dist, "answer": answer,
            "references": refs,
        })
    return outcome


def confidence(outcome: ReasonOutcome | dict[str, float]) -> float:
    """Negative entropy (natural log) of the vote distribution; 0 for a unanimous vote."""
    dist = outcome.distribution if isinstance(outcome, ReasonOutcome) else outcome
    p = np.fromiter(dist.values(), dtype=np.float64, count=len(dist))
    if p.size == 0:
        raise ValueError("empty distribution")
    return float(_kernels.neg_entropy(p[None, :])[0])


def _map(fn: Callable, items: Sequence, parallelism: int) -> list:
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def predict(
    dataset: Sequence[Instance],
    store: GuidelineStore,
    task: TaskSpec,
    backends: Backends,
    audit: AuditSink | None = None,
    salt: str = "predict",
) -> list[ReasonOutcome]:
    """Pure inference. Per-instance failures come back as outcomes with ``error`` set."""

    def one(inst: Instance) -> ReasonOutcome:
        try:
            return reason(inst, store, task, backends, salt=salt, audit=audit)
        except (BackendError, ContentError) as exc:
            log.error("instance %s failed: %s", inst.id, exc)
            return ReasonOutcome(inst.id, {}, None, [], [], [], error=f"{type(exc).__name__}: {exc}")

    return _map(one, list(dataset), backends.parallelism)


@dataclass
class Selection:
    selected: list[str]
    table: list[dict[str, Any]]
    failed: list[str]


def lowest_confidence(ids: Sequence[str], confidences: Sequence[float], budget: int) -> list[str]:
    conf = np.asarray(confidences, dtype=np.float64)
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    order = np.lexsort((id_rank, conf))
    return [ids[i] for i in order[:budget]]


def active_select(
    pool: Sequence[Instance],
    budget: int,
    store: GuidelineStore,
    task: TaskSpec,
    backends: Backends,
    audit: AuditSink | None = None,
) -> Selection:
    """Pick the ``budget`` pool instances the reasoner is least sure about."""
    if budget < 1:
        raise ValueError("budget must be positive")
    if budget > len(pool):
        raise ValueError(f"budget {budget} exceeds pool size {len(pool)}")
    outcomes = predict(pool, store, task, backends, audit=audit, salt="select")
    ok = [o for o in outcomes if o.ok]
    failed = [o.instance_id for o in outcomes if not o.ok]
    if ok:
        width = len(task.class_ids)
        probs = np.zeros((len(ok), width), dtype=np.float64)
        col = {c: j for j, c in enumerate(task.class_ids)}
        for i, o in enumerate(ok):
            for c, p in o.distribution.items():
                probs[i, col[c]] = p
        confs = _kernels.neg_entropy(probs)
    else:
        confs = np.empty(0)
    table = [{"id": o.instance_id, "confidence": float(c), "distribution": o.distribution}
             for o, c in zip(ok, confs)]
    selected = lowest_confidence([o.instance_id for o in ok], confs, budget)
    return Selection(selected, table, failed)


@dataclass
class EpochReport:
    epoch: int
    n_instances: int = 0
    n_correct: int = 0
    n_errors: int = 0
    rules_added: int = 0
    rules_merged: int = 0
    rules_pruned: int = 0
    pruned_ids: list[int] = field(default_factory=list)
    audit: list[dict[str, Any]] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_instances if self.n_instances else 0.0

    def to_dict(self, with_audit: bool = False) -> dict[str, Any]:
        d = asdict(self)
        if not with_audit:
            d.pop("audit")
        return d


def train(
    dataset: Sequence[Instance],
    store: GuidelineStore,
    task: TaskSpec,
    backends: Backends,
    audit: AuditSink | None = None,
    on_error: str = "abort",
    on_epoch_end: Callable[[EpochReport, GuidelineStore], None] | None = None,
) -> tuple[GuidelineStore, list[EpochReport]]:
    """Learn guidelines from labeled instances.

    Each epoch reasons over every instance against the store as it stood at
    the start of the epoch, updates rule statistics, caches a reflected rule
    for every error, then flushes the cache and forgets harmful rules.
    """
    if on_error not in ("abort", "skip"):
        raise ValueError("on_error must be 'abort' or 'skip'")
    for inst in dataset:
        inst.require_gold()
    h = task.hyper
    reports = []
    items = list(dataset)
    for epoch in range(1, h.epochs + 1):
        if h.shuffle:
            random.Random(backends.seed * 1000003 + epoch).shuffle(items)
        report = EpochReport(epoch)
        salt = f"train:{epoch}"

        def one(inst: Instance):
            try:
                return reason(inst, store, task, backends, salt=salt)
            except (BackendError, ContentError) as exc:
                if on_error == "abort":
                    raise
                log.error("epoch %d: skipping %s: %s", epoch, inst.id, exc)
                return None

        # reasoning only reads the store; all mutations happen below
        outcomes = _map(one, items, backends.parallelism)
        new_rules: list[tuple[str, str]] = []
        for inst, out in zip(items, outcomes):
            if out is None:
                continue
            correct = out.answer == inst.gold
            store.record_retrieval(out.retrieved)
            store.record_outcome(out.references, correct, retrieved=out.retrieved)
            report.n_instances += 1
            record = {"instance_id": inst.id, "gold": inst.gold, "answer": out.answer,
                      "retrieved": out.retrieved, "references": out.references,
                      "distribution": out.distribution, "general_form": out.general_form}
            if correct:
                report.n_correct += 1
            else:
                report.n_errors += 1
                rule = reflect(GeneralForm(out.general_form, inst.id), inst.gold, task)
                new_rules.append((inst.id, rule))
                record["new_rule"] = rule
            report.audit.append(record)
            if audit is not None:
                audit({"epoch": epoch, **record, "trials": [t.raw for t in out.trials]})

        # cache order follows instance ids so the epoch result ignores visiting order
        for _, rule in sorted(new_rules):
            store.add_pending(rule)
        flushed = store.flush_pending(backends.embedder.embed, h.dup_threshold, epoch=epoch)
        report.rules_added = len(flushed.inserted)
        report.rules_merged = len(flushed.merged)
        report.pruned_ids = store.prune(h.discard_threshold, h.min_evidence)
        report.rules_pruned = len(report.pruned_ids)
        log.info("epoch %d: %d/%d correct, +%d rules, %d merged, %d pruned, %d total",
                 epoch, report.n_correct, report.n_instances, report.rules_added,
                 report.rules_merged, report.rules_pruned, len(store))
        reports.append(report)
        if on_epoch_end is not None:
            on_epoch_end(report, store)
    return store, reports
