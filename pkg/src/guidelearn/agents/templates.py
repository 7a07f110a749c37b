"""Prompt templates with ``{name}`` placeholders."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

# ``{{`` and ``}}`` escape literal braces; anything else in braces that is not
# an identifier (JSON snippets, markdown) passes through untouched.
_TOKEN = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}")

EMPTY_GUIDELINES = "No guidelines retrieved."

_INSTANCE = {"input", "sentence", "document", "entities", "head", "tail", "share", "description", "classes"}
_TASK = {"instruction", "demonstrations"}

# What the agent roles are able to bind when rendering their template.
ROLE_PLACEHOLDERS: dict[str, set[str]] = {
    "reasoner": _INSTANCE | _TASK | {"retrieved_guidelines"},
    "generalizer": _INSTANCE | _TASK,
    "generalizer_types": _INSTANCE | _TASK | {"relevant_text"},
    "summarizer": _TASK | {"document", "share"},
    "argument_extraction": _TASK | {"document", "shares", "roles"},
}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: frozenset[str] = field(init=False)

    def __post_init__(self) -> None:
        names = {m.group(1) for m in _TOKEN.finditer(self.body) if m.group(1)}
        object.__setattr__(self, "required_placeholders", frozenset(names))

    def render(self, bindings: Mapping[str, str]) -> str:
        return render_prompt(self, bindings)

    def render_from(self, pool: Mapping[str, str]) -> str:
        """Render taking only the placeholders this template uses from ``pool``."""
        missing = sorted(self.required_placeholders - set(pool))
        if missing:
            raise TemplateError(f"template {self.name!r} missing bindings: {', '.join(missing)}")
        return render_prompt(self, {k: pool[k] for k in self.required_placeholders})


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    missing = sorted(template.required_placeholders - set(bindings))
    if missing:
        raise TemplateError(f"template {template.name!r} missing bindings: {', '.join(missing)}")
    unknown = sorted(set(bindings) - template.required_placeholders)
    if unknown:
        raise TemplateError(f"template {template.name!r} got unknown bindings: {', '.join(unknown)}")

    def sub(m: re.Match) -> str:
        tok = m.group(0)
        if tok == "{{":
            return "{"
        if tok == "}}":
            return "}"
        return str(bindings[m.group(1)])

    return _TOKEN.sub(sub, template.body)


def format_guideline_block(rules: Sequence[str]) -> str:
    if not rules:
        return EMPTY_GUIDELINES
    return "\n".join(f"{i}. {text}" for i, text in enumerate(rules, 1))
