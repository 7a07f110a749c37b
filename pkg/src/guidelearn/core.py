"""Domain types shared across the package and the task-spec file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from guidelearn.agents.templates import ROLE_PLACEHOLDERS, PromptTemplate


@dataclass(frozen=True)
class ClassLabel:
    id: str
    display_name: str = ""
    negative: bool = False

    @property
    def name(self) -> str:
        return self.display_name or self.id


@dataclass(frozen=True)
class Span:
    """Character-offset span ``text[start:end]`` of some source text."""

    text: str
    start: int
    end: int


@dataclass(frozen=True)
class Instance:
    """One classification unit.

    ``focus`` holds a single span for a candidate trigger and two spans
    (head, tail) for a relation instance. ``gold`` is a class id or None for
    unlabeled pool items. When ``derived_text`` is set it replaces ``text``
    as the reasoner input.
    """

    id: str
    text: str
    focus: tuple[Span, ...] = ()
    gold: str | None = None
    derived_text: str | None = None

    def __post_init__(self) -> None:
        for span in self.focus:
            if not 0 <= span.start <= span.end <= len(self.text):
                raise ValueError(f"instance {self.id}: span {span.start}:{span.end} outside text bounds")
            if span.text and self.text[span.start:span.end] != span.text:
                raise ValueError(
                    f"instance {self.id}: span text {span.text!r} does not match "
                    f"{self.text[span.start:span.end]!r} at {span.start}:{span.end}"
                )

    @property
    def reasoner_input(self) -> str:
        return self.derived_text if self.derived_text is not None else self.text

    def focus_strings(self) -> tuple[str, ...]:
        return tuple(self.text[s.start:s.end] for s in self.focus)

    def require_gold(self) -> str:
        if self.gold is None:
            raise ValueError(f"instance {self.id} has no gold label")
        return self.gold


@dataclass(frozen=True)
class GeneralForm:
    text: str
    source_instance_id: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"empty general form for instance {self.source_instance_id}")


@dataclass(frozen=True)
class Demonstration:
    input: str
    output: str


@dataclass
class HyperParams:
    epochs: int = 3
    top_k: int = 3
    retrieval_threshold: float = 0.92
    sc_trials: int = 5
    sc_temperature: float = 1.0
    discard_threshold: float = 0.0
    min_evidence: int = 1
    selection_budget: int = 500
    dup_threshold: float = 0.98
    reply_retries: int = 2
    n_demonstrations: int | None = None
    shuffle: bool = False

    @classmethod
    def relation_extraction(cls, **overrides: Any) -> "HyperParams":
        return cls(**{"epochs": 3, "top_k": 3, "retrieval_threshold": 0.92, "sc_trials": 5,
                      "sc_temperature": 1.0, "discard_threshold": 0.0, **overrides})

    @classmethod
    def event_extraction(cls, **overrides: Any) -> "HyperParams":
        return cls(**{"epochs": 5, "top_k": 3, "retrieval_threshold": 0.95, "sc_trials": 8,
                      "sc_temperature": 1.0, "discard_threshold": 0.0, "selection_budget": 50,
                      **overrides})

    def replace(self, **overrides: Any) -> "HyperParams":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown = set(overrides) - set(values)
        if unknown:
            raise ValueError(f"unknown hyper-parameters: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return HyperParams(**values)


@dataclass
class TaskSpec:
    """Class inventory, instruction, templates, demonstrations and knobs of one task.

    ``verdicts`` maps a class id to the sentence appended to a general form
    when a rule is reflected from an error case; classes without an entry use
    ``verdict_template`` with ``{label}`` / ``{name}`` filled in.
    """

    task_id: str
    instruction: str
    classes: list[ClassLabel]
    demonstrations: list[Demonstration] = field(default_factory=list)
    templates: dict[str, PromptTemplate] = field(default_factory=dict)
    hyper: HyperParams = field(default_factory=HyperParams)
    kind: str = "generic"
    verdict_template: str = "The relation is {label}."
    verdicts: dict[str, str] = field(default_factory=dict)
    requires_summary: bool = False

    @property
    def class_ids(self) -> list[str]:
        return [c.id for c in self.classes]

    @property
    def negative_class(self) -> str | None:
        for c in self.classes:
            if c.negative:
                return c.id
        return None

    def label(self, class_id: str) -> ClassLabel:
        for c in self.classes:
            if c.id == class_id:
                return c
        raise KeyError(class_id)

    def verdict_for(self, class_id: str) -> str:
        if class_id in self.verdicts:
            return self.verdicts[class_id]
        return self.verdict_template.format(label=class_id, name=self.label(class_id).name)

    def active_demonstrations(self) -> list[Demonstration]:
        n = self.hyper.n_demonstrations
        return list(self.demonstrations if n is None else self.demonstrations[:n])

    def template(self, role: str) -> PromptTemplate:
        try:
            return self.templates[role]
        except KeyError:
            raise KeyError(f"task {self.task_id} has no {role!r} template") from None


@dataclass(frozen=True)
class Defect:
    kind: str
    message: str


REQUIRED_ROLES = {"reasoner", "generalizer"}


def validate_task(spec: TaskSpec) -> list[Defect]:
    """Report every problem with ``spec``; an empty list means it is usable."""
    report: list[Defect] = []
    seen: dict[str, int] = {}
    for c in spec.classes:
        if not c.id.strip():
            report.append(Defect("empty-id", "class with empty id"))
            continue
        seen[c.id] = seen.get(c.id, 0) + 1
    for cid, count in seen.items():
        if count > 1:
            report.append(Defect("duplicate-id", f"class id {cid!r} appears {count} times"))
    if not spec.classes:
        report.append(Defect("no-classes", "task defines no classes"))
    if sum(c.negative for c in spec.classes) > 1:
        report.append(Defect("multiple-negative", "more than one class flagged negative"))

    needed = set(REQUIRED_ROLES)
    if spec.requires_summary:
        needed.add("summarizer")
    for role in sorted(needed - set(spec.templates)):
        report.append(Defect("missing-template", f"no template for role {role!r}"))
    for role, tpl in sorted(spec.templates.items()):
        providers = ROLE_PLACEHOLDERS.get(role)
        if providers is None:
            report.append(Defect("unknown-role", f"template role {role!r} has no placeholder provider"))
            continue
        for name in sorted(tpl.required_placeholders - providers):
            report.append(Defect("unresolvable-placeholder", f"{role} template uses {{{name}}} which nothing provides"))

    h = spec.hyper
    checks = [
        ("epochs", h.epochs >= 1),
        ("top_k", h.top_k >= 1),
        ("retrieval_threshold", -1.0 <= h.retrieval_threshold <= 1.0),
        ("sc_trials", h.sc_trials >= 1),
        ("sc_temperature", h.sc_temperature >= 0.0),
        ("min_evidence", h.min_evidence >= 0),
        ("selection_budget", h.selection_budget >= 1),
        ("dup_threshold", -1.0 <= h.dup_threshold <= 1.0),
        ("reply_retries", h.reply_retries >= 0),
        ("n_demonstrations", h.n_demonstrations is None or h.n_demonstrations >= 0),
    ]
    for name, ok in checks:
        if not ok:
            report.append(Defect("range", f"hyper-parameter {name}={getattr(h, name)!r} out of range"))
    for cid in spec.verdicts:
        if cid not in seen:
            report.append(Defect("unknown-verdict-class", f"verdict given for unknown class {cid!r}"))
    return report


# -- file representation ---------------------------------------------------

def _resolve(base: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def load_demonstrations(path: str | Path) -> list[Demonstration]:
    demos = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                demos.append(Demonstration(input=rec["input"], output=rec["output"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad demonstration record ({exc})") from exc
    return demos


def load_task(path: str | Path) -> TaskSpec:
    """Read a YAML task file; template and demonstration paths are relative to it."""
    path = Path(path)
    base = path.parent
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: task file must be a mapping")

    classes = []
    for entry in doc.get("classes", []):
        if isinstance(entry, str):
            classes.append(ClassLabel(entry))
        else:
            classes.append(ClassLabel(str(entry["id"]), entry.get("display_name", ""), bool(entry.get("negative", False))))

    templates = {}
    for role, ref in (doc.get("templates") or {}).items():
        if isinstance(ref, dict) and "body" in ref:
            templates[role] = PromptTemplate(role, ref["body"])
        else:
            templates[role] = PromptTemplate(role, _resolve(base, str(ref)).read_text(encoding="utf-8"))

    demos: list[Demonstration] = []
    if doc.get("demonstrations"):
        demos = load_demonstrations(_resolve(base, doc["demonstrations"]))

    hyper = HyperParams(**(doc.get("hyper") or {}))
    return TaskSpec(
        task_id=str(doc["task_id"]),
        instruction=doc.get("instruction", ""),
        classes=classes,
        demonstrations=demos,
        templates=templates,
        hyper=hyper,
        kind=doc.get("kind", "generic"),
        verdict_template=doc.get("verdict_template", TaskSpec.verdict_template),
        verdicts={str(k): v for k, v in (doc.get("verdicts") or {}).items()},
        requires_summary=bool(doc.get("requires_summary", False)),
    )


def dump_task(spec: TaskSpec, path: str | Path) -> None:
    """Write ``spec`` as a task file plus one template file per role and a demonstrations file."""
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    template_refs = {}
    for role, tpl in spec.templates.items():
        name = f"{stem}.{role}.txt"
        (base / name).write_text(tpl.body, encoding="utf-8")
        template_refs[role] = name
    demo_name = f"{stem}.demos.jsonl"
    with open(base / demo_name, "w", encoding="utf-8") as fh:
        for d in spec.demonstrations:
            fh.write(json.dumps({"input": d.input, "output": d.output}, ensure_ascii=False) + "\n")
    doc = {
        "task_id": spec.task_id,
        "kind": spec.kind,
        "instruction": spec.instruction,
        "classes": [{"id": c.id, "display_name": c.display_name, "negative": c.negative} for c in spec.classes],
        "templates": template_refs,
        "demonstrations": demo_name,
        "hyper": {f.name: getattr(spec.hyper, f.name) for f in fields(spec.hyper)},
        "verdict_template": spec.verdict_template,
        "verdicts": dict(spec.verdicts),
        "requires_summary": spec.requires_summary,
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False, allow_unicode=True)
