import json
import os
from pathlib import Path

import numpy as np
import pytest

from guidelearn.agents.backends import FunctionBackend
from guidelearn.agents.embeddings import HashedEmbedder
from guidelearn.agents.templates import PromptTemplate
from guidelearn.core import ClassLabel, HyperParams, TaskSpec
from guidelearn.engine import Backends

ROOT = Path(__file__).resolve().parents[1]
RE_TOY = ROOT / "demo" / "re_toy"
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def pytest_collection_modifyitems(config, items):
    if os.environ.get("GUIDELEARN_LIVE") == "1":
        return
    skip = pytest.mark.skip(reason="live test; set GUIDELEARN_LIVE=1 and provide credentials")
    for item in items:
        if "live" in item.keywords:
            item.add_marker(skip)


def unit(*xs):
    v = np.asarray(xs, dtype=np.float64)
    return v / np.linalg.norm(v)


def simple_task(classes=("A", "B"), negative=None, **hyper):
    """Minimal task whose prompts are easy for a FunctionBackend to parse."""
    return TaskSpec(
        task_id="t",
        instruction="Label the input.",
        classes=[ClassLabel(c, negative=(c == negative)) for c in classes],
        templates={
            "reasoner": PromptTemplate("reasoner", "GUIDE\n{retrieved_guidelines}\nINPUT {input}"),
            "generalizer": PromptTemplate("generalizer", "GEN {input}"),
        },
        hyper=HyperParams(**{"epochs": 1, "top_k": 3, "retrieval_threshold": 0.9, "sc_trials": 1,
                             "sc_temperature": 0.0, **hyper}),
        verdict_template="The label is {label}.",
    )


def function_backends(reasoner, generalizer=None, dimension=64, seed=0):
    gen = generalizer or (lambda prompt, seed: prompt.split("GEN ", 1)[1].strip())
    return Backends(
        reasoner=FunctionBackend(reasoner),
        generalizer=FunctionBackend(gen),
        embedder=HashedEmbedder(dimension),
        seed=seed,
    )


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    return path
