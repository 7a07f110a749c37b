"""Guideline learning for in-context information extraction."""

from guidelearn.core import (
    ClassLabel,
    Defect,
    Demonstration,
    GeneralForm,
    HyperParams,
    Instance,
    Span,
    TaskSpec,
    dump_task,
    load_task,
    validate_task,
)
from guidelearn.store import Guideline, GuidelineStore, cosine_similarity, score
from guidelearn.engine import Backends, ReasonOutcome, active_select, confidence, predict, reason, train

__version__ = "0.1.0"
