"""The LLM agent roles: generalizer, reasoner reply grammar, reflect, summarizer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from guidelearn.agents.backends import AgentBackend, ContentError, user_turn
from guidelearn.agents.templates import PromptTemplate
from guidelearn.core import Demonstration, GeneralForm, Instance, TaskSpec

_ANSWER = re.compile(r"^\s*answer\s*:\s*(.*?)\s*$", re.IGNORECASE)
_REFS = re.compile(r"^\s*references\s*:\s*\[(.*)\]\s*$", re.IGNORECASE)


class UnparseableReply(ContentError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class ReasonerReply:
    reasoning: str
    answer: str
    references: tuple[int, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)


def format_demonstrations(demos: Sequence[Demonstration]) -> str:
    return "\n\n".join(f"{d.input}\n{d.output}" for d in demos)


def instance_bindings(instance: Instance, task: TaskSpec) -> dict[str, str]:
    """Everything an agent template may reference about one instance."""
    pool = {
        "input": instance.reasoner_input,
        "sentence": instance.text,
        "document": instance.text,
        "instruction": task.instruction,
        "demonstrations": format_demonstrations(task.active_demonstrations()),
        "classes": ", ".join(task.class_ids),
    }
    spans = instance.focus_strings()
    if len(spans) == 1:
        pool["share"] = spans[0]
    elif len(spans) == 2:
        pool["head"], pool["tail"] = spans
        pool["entities"] = f"({spans[0]}, {spans[1]})"
    if instance.derived_text is not None:
        pool["description"] = instance.derived_text
    return pool


def _call(backend: AgentBackend, prompt: str, seed: int | None) -> str:
    reply = backend.complete(user_turn(prompt), temperature=0.0, seed=seed)
    if not reply or not reply.strip():
        raise ContentError("empty completion")
    return reply.strip()


def generalize(
    backend: AgentBackend,
    template: PromptTemplate | tuple[PromptTemplate, PromptTemplate],
    instance: Instance,
    task: TaskSpec,
    seed: int | None = None,
) -> GeneralForm:
    """Abstract ``instance`` into a general form.

    Given a pair of templates, the first extracts the relevant text and the
    second abstracts entity types (it sees the first reply as
    ``{relevant_text}``); both replies are joined into one general form.
    """
    if not instance.text.strip():
        raise ValueError(f"instance {instance.id} has empty text")
    pool = instance_bindings(instance, task)
    if isinstance(template, tuple):
        span_tpl, type_tpl = template
        relevant = _call(backend, span_tpl.render_from(pool), seed)
        types = _call(backend, type_tpl.render_from({**pool, "relevant_text": relevant}), seed)
        return GeneralForm(f"{relevant} {types}", instance.id)
    return GeneralForm(_call(backend, template.render_from(pool), seed), instance.id)


def reflect(general_form: GeneralForm, gold: str, task: TaskSpec) -> str:
    """Rule text for an error case: the general form followed by the gold verdict."""
    text = general_form.text.rstrip()
    if text and text[-1] not in ".!?。":
        text += "."
    return f"{text} {task.verdict_for(gold)}"


def parse_reasoner_reply(raw: str, n_retrieved: int, classes: Sequence[str]) -> ReasonerReply:
    lines = raw.splitlines()
    answer_at = None
    for i in range(len(lines) - 1, -1, -1):
        if _ANSWER.match(lines[i]):
            answer_at = i
            break
    if answer_at is None:
        raise UnparseableReply("no 'Answer:' line in reply", raw)
    token = _ANSWER.match(lines[answer_at]).group(1).strip().strip("*`'\"").rstrip(".").strip()
    lookup = {c.lower(): c for c in classes}
    answer = lookup.get(token.lower())
    if answer is None:
        raise UnparseableReply(f"answer {token!r} is not a known class", raw)

    refs: list[int] = []
    warnings: list[str] = []
    for line in lines[answer_at + 1:]:
        m = _REFS.match(line)
        if not m:
            continue
        refs, warnings = [], []
        for part in m.group(1).split(","):
            part = part.strip()
            if not part:
                continue
            try:
                idx = int(part)
            except ValueError:
                warnings.append(f"non-integer reference {part!r} dropped")
                continue
            if not 1 <= idx <= n_retrieved:
                warnings.append(f"reference {idx} outside 1..{n_retrieved} dropped")
            elif idx not in refs:
                refs.append(idx)
    reasoning = "\n".join(lines[:answer_at]).strip()
    return ReasonerReply(reasoning, answer, tuple(refs), tuple(warnings))


def format_reasoner_reply(reasoning: str, answer: str, references: Sequence[int] = ()) -> str:
    parts = [reasoning.rstrip()] if reasoning.strip() else []
    parts.append(f"Answer: {answer}")
    if references:
        parts.append(f"References: [{', '.join(str(i) for i in references)}]")
    return "\n".join(parts)


def summarize_trigger(
    backend: AgentBackend,
    template: PromptTemplate,
    document: str,
    trigger_span: str,
    task: TaskSpec | None = None,
    seed: int | None = None,
) -> str:
    if trigger_span not in document:
        raise ValueError(f"trigger {trigger_span!r} does not occur in the document")
    pool = {"document": document, "share": trigger_span}
    if task is not None:
        pool["instruction"] = task.instruction
        pool["demonstrations"] = format_demonstrations(task.active_demonstrations())
    return _call(backend, template.render_from(pool), seed)
