"""Relation extraction: one instance per (sentence, ordered entity pair)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from guidelearn.core import Instance, Span, TaskSpec
from guidelearn.engine import Backends, ReasonOutcome, predict
from guidelearn.store import GuidelineStore
from guidelearn.tasks.metrics import classification_prf


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RelationInstanceRecord:
    id: str
    sentence: str
    head: Span
    tail: Span
    label: str | None = None

    def __post_init__(self) -> None:
        for role, s in (("head", self.head), ("tail", self.tail)):
            if not 0 <= s.start < s.end <= len(self.sentence):
                raise DataError(f"{self.id}: {role} span {s.start}:{s.end} outside sentence")
        if self.head.start < self.tail.end and self.tail.start < self.head.end:
            raise DataError(f"{self.id}: head and tail spans overlap")

    @classmethod
    def from_dict(cls, rec: dict) -> "RelationInstanceRecord":
        def span(d: dict) -> Span:
            return Span(str(d.get("text", "")), int(d["start"]), int(d["end"]))

        return cls(str(rec["id"]), rec["sentence"], span(rec["head"]), span(rec["tail"]), rec.get("label"))

    def to_instance(self) -> Instance:
        return Instance(self.id, self.sentence, (self.head, self.tail), gold=self.label)


def read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: record is not an object")
            rows.append((lineno, rec))
    return rows


def load_relation_dataset(path: str | Path) -> list[RelationInstanceRecord]:
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(RelationInstanceRecord.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad relation record ({exc})") from exc
    ids = [r.id for r in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate instance ids")
    return out


def run_relation_task(
    dataset: Sequence[RelationInstanceRecord],
    store: GuidelineStore,
    task: TaskSpec,
    backends: Backends,
    score_other: bool = False,
    audit=None,
) -> tuple[list[ReasonOutcome], dict]:
    ids = [r.id for r in dataset]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate instance ids")
    outcomes = predict([r.to_instance() for r in dataset], store, task, backends, audit=audit)
    gold = {r.id: r.label for r in dataset if r.label is not None}
    pred = {o.instance_id: o.answer for o in outcomes}
    negative = None if score_other else task.negative_class
    return outcomes, classification_prf(gold, pred, negative=negative, classes=task.class_ids)


def load_instances(path: str | Path, kind: str = "generic") -> list[Instance]:
    """Instances for the engine from a JSON-lines file.

    ``re``: relation records. ``trigger``: ``{id, document, trigger{text,start,end},
    description?, label?}``. Anything else: ``{id, text, gold?|label?, derived_text?}``.
    """
    if kind == "re":
        return [r.to_instance() for r in load_relation_dataset(path)]
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            if kind == "trigger":
                t = rec["trigger"]
                span = Span(str(t.get("text", "")), int(t["start"]), int(t["end"]))
                out.append(Instance(str(rec["id"]), rec["document"], (span,),
                                    gold=rec.get("label"), derived_text=rec.get("description")))
            else:
                out.append(Instance(str(rec["id"]), rec["text"], gold=rec.get("gold", rec.get("label")),
                                    derived_text=rec.get("derived_text")))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad instance record ({exc})") from exc
    ids = [x.id for x in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate instance ids")
    return out
