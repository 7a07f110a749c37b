"""Event extraction as trigger identification, per-type trigger classification, and argument extraction."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from guidelearn.agents.backends import AgentBackend, ContentError, user_turn
from guidelearn.agents.roles import format_demonstrations, summarize_trigger
from guidelearn.agents.templates import PromptTemplate
from guidelearn.core import Instance, Span, TaskSpec
from guidelearn.engine import Backends, predict
from guidelearn.store import GuidelineStore
from guidelearn.tasks.relation import DataError, read_jsonl

log = logging.getLogger(__name__)

SHARES_PATTERN = r"\d(?:[\d,.]*\d)?\s*(?:万|亿)?\s*(?:shares|股)"


@dataclass(frozen=True)
class EventRecord:
    event_type: str
    roles: dict[str, str] = field(default_factory=dict)

    def as_tuple(self) -> tuple[str, dict[str, str]]:
        return (self.event_type, self.roles)


@dataclass(frozen=True)
class EventDocumentRecord:
    id: str
    document: str
    gold_events: tuple[EventRecord, ...] = ()
    gold_triggers: tuple[tuple[Span, str | None], ...] | None = None

    @classmethod
    def from_dict(cls, rec: dict) -> "EventDocumentRecord":
        doc = rec["document"]
        events = tuple(
            EventRecord(str(e["event_type"]), {k: str(v) for k, v in (e.get("roles") or {}).items() if v not in (None, "")})
            for e in rec.get("gold_events") or []
        )
        triggers = None
        if rec.get("gold_triggers") is not None:
            triggers = []
            for t in rec["gold_triggers"]:
                span = Span(str(t.get("text", "")), int(t["start"]), int(t["end"]))
                if doc[span.start:span.end] != span.text:
                    raise DataError(f"{rec['id']}: trigger {span.text!r} not at {span.start}:{span.end}")
                triggers.append((span, t.get("event_type")))
            triggers = tuple(triggers)
        return cls(str(rec["id"]), doc, events, triggers)


class ExtractionError(ContentError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


def load_event_dataset(path: str | Path) -> list[EventDocumentRecord]:
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(EventDocumentRecord.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad event record ({exc})") from exc
    return out


def identify_triggers(document: str, patterns: Sequence[str] = (SHARES_PATTERN,)) -> list[Span]:
    """Candidate trigger spans: non-overlapping pattern matches, leftmost-longest first."""
    if not patterns:
        raise ValueError("at least one pattern is required")
    found = []
    for pat in patterns:
        try:
            rx = re.compile(pat)
        except re.error as exc:
            raise ValueError(f"invalid trigger pattern {pat!r}: {exc}") from exc
        found.extend((m.start(), m.end()) for m in rx.finditer(document) if m.end() > m.start())
    found.sort(key=lambda se: (se[0], -(se[1] - se[0])))
    spans, last_end = [], -1
    for start, end in found:
        if start >= last_end:
            spans.append(Span(document[start:end], start, end))
            last_end = end
    return spans


def positive_type(task: TaskSpec) -> str:
    positives = [c.id for c in task.classes if not c.negative]
    if len(positives) != 1:
        raise ValueError(f"task {task.task_id} is not a binary per-type task")
    return positives[0]


def trigger_instances(
    doc: EventDocumentRecord,
    candidates: Sequence[Span],
    summarizer: AgentBackend,
    template: PromptTemplate,
    task: TaskSpec | None = None,
) -> list[Instance]:
    """One instance per candidate, carrying the summarizer's description as derived text."""
    out = []
    for i, span in enumerate(candidates):
        desc = summarize_trigger(summarizer, template, doc.document, span.text, task)
        out.append(Instance(f"{doc.id}#{i}", doc.document, (span,), derived_text=desc))
    return out


def classify_triggers(
    doc: EventDocumentRecord,
    candidates: Sequence[Span],
    per_type_tasks: Sequence[TaskSpec],
    stores: Mapping[str, GuidelineStore],
    backends: Backends,
    summary_template: PromptTemplate,
) -> list[tuple[Span, str | None]]:
    """Binary classification of every candidate for every event type.

    A candidate positive for several types yields one pair per type; one
    positive for none yields ``(span, None)``.
    """
    if not candidates:
        return []
    summarizer = backends.summarizer or backends.reasoner
    instances = trigger_instances(doc, candidates, summarizer, summary_template, per_type_tasks[0])
    hits: dict[int, list[str]] = {i: [] for i in range(len(instances))}
    for task in per_type_tasks:
        etype = positive_type(task)
        outcomes = predict(instances, stores[etype], task, backends)
        for i, o in enumerate(outcomes):
            if o.ok and o.answer == etype:
                hits[i].append(etype)
    result: list[tuple[Span, str | None]] = []
    for i, span in enumerate(candidates):
        if hits[i]:
            result.extend((span, t) for t in hits[i])
        else:
            result.append((span, None))
    return result


_SEP = re.compile(r"^\s*\|?\s*:?-{3,}:?\s*(\|\s*:?-{3,}:?\s*)*\|?\s*$")


def _cells(line: str) -> list[str]:
    s = line.strip()
    if s.startswith("|"):
        s = s[1:]
    if s.endswith("|"):
        s = s[:-1]
    return [c.strip() for c in s.split("|")]


def parse_event_table(
    text: str,
    schema: Mapping[str, Sequence[str]] | None = None,
) -> tuple[list[EventRecord], list[str]]:
    """Parse the first markdown table whose header has an ``event_type`` column.

    Returns the records and warnings. Role columns absent from the schema of
    a row's event type are dropped; cells that are empty or "-" are absent roles.
    """
    lines = text.splitlines()
    for i in range(len(lines) - 1):
        if "|" not in lines[i] or not _SEP.match(lines[i + 1]):
            continue
        header = [h.strip().strip("*").lower().replace(" ", "_") for h in _cells(lines[i])]
        if "event_type" not in header:
            continue
        type_col = header.index("event_type")
        records: list[EventRecord] = []
        warnings: list[str] = []
        warned: set[tuple[str, str]] = set()
        for line in lines[i + 2:]:
            if "|" not in line:
                break
            cells = _cells(line)
            if len(cells) < len(header):
                cells += [""] * (len(header) - len(cells))
            etype = cells[type_col]
            if not etype or etype == "-":
                continue
            allowed = None if schema is None else set(schema.get(etype, ()))
            if schema is not None and etype not in schema:
                warnings.append(f"unknown event type {etype!r} skipped")
                continue
            roles = {}
            for j, col in enumerate(header):
                if j == type_col:
                    continue
                value = cells[j]
                if allowed is not None and col not in allowed:
                    if (etype, col) not in warned:
                        warned.add((etype, col))
                        warnings.append(f"column {col!r} is not a role of {etype}; ignored")
                    continue
                if value and value != "-":
                    roles[col] = value
            records.append(EventRecord(etype, roles))
        for w in warnings:
            log.warning(w)
        return records, warnings
    raise ExtractionError("no markdown table with an event_type header in reply", text)


def extract_arguments(
    backend: AgentBackend,
    template: PromptTemplate,
    document: str,
    typed_triggers: Sequence[tuple[Span, str]],
    schema: Mapping[str, Sequence[str]] | None = None,
    task: TaskSpec | None = None,
) -> list[EventRecord]:
    if not typed_triggers:
        raise ValueError("no typed triggers given")
    pool = {
        "document": document,
        "shares": "\n".join(f"{span.text} ({etype})" for span, etype in typed_triggers),
        "roles": "\n".join(f"{t}: {', '.join(r)}" for t, r in (schema or {}).items()),
        "instruction": task.instruction if task else "",
        "demonstrations": format_demonstrations(task.active_demonstrations()) if task else "",
    }
    raw = backend.complete(user_turn(template.render_from(pool)), temperature=0.0, seed=0)
    records, _ = parse_event_table(raw, schema)
    return records


def run_event_pipeline(
    docs: Sequence[EventDocumentRecord],
    per_type_tasks: Sequence[TaskSpec],
    stores: Mapping[str, GuidelineStore],
    backends: Backends,
    summary_template: PromptTemplate,
    extraction_template: PromptTemplate,
    schema: Mapping[str, Sequence[str]] | None = None,
    patterns: Sequence[str] = (SHARES_PATTERN,),
) -> dict[str, list[EventRecord]]:
    """Identify, classify and extract; returns predicted records per document id."""
    out: dict[str, list[EventRecord]] = {}
    extractor = backends.reasoner
    for doc in docs:
        candidates = identify_triggers(doc.document, patterns)
        typed = [(s, t) for s, t in classify_triggers(doc, candidates, per_type_tasks, stores,
                                                      backends, summary_template) if t is not None]
        out[doc.id] = extract_arguments(extractor, extraction_template, doc.document, typed, schema) if typed else []
    return out
